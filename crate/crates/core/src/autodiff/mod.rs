//! Reverse-mode differentiation over the operations used by the training
//! path: dense algebra, element-wise nonlinearities, complex polar pieces,
//! real FFTs and framing/overlap-add. Everything is `f64`.

pub mod audio;
pub mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_indices, ElementCheck, ExclusionReason, GradCheckConfig, GradCheckReport};
pub use tape::{Gradients, Tape, Value, Var};

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::signal::{StftConfig, StftPlan, WindowKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use realfft::num_complex::Complex64;
    use std::f64::consts::LN_10;
    use std::sync::Arc;

    fn rnd(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn pos(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.2..2.0))
    }

    fn crnd(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<Complex64> {
        Matrix::from_fn(rows, cols, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn inner(a: &Value, b: &Value) -> f64 {
        match (a, b) {
            (Value::Real(x), Value::Real(y)) => x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum(),
            (Value::Complex(x), Value::Complex(y)) => x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| p.re * q.re + p.im * q.im)
                .sum(),
            _ => panic!("kind mismatch"),
        }
    }

    fn random_like(v: &Value, rng: &mut ChaCha8Rng) -> Value {
        let (r, c) = v.shape();
        match v {
            Value::Real(_) => Value::Real(rnd(r, c, rng)),
            Value::Complex(_) => Value::Complex(crnd(r, c, rng)),
        }
    }

    /// `⟨J·v, w⟩ = ⟨v, Jᵀ·w⟩` with `J·v` supplied by an independent oracle.
    fn dot_test(
        inputs: &[Value],
        tangents: &[Value],
        build: impl Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>,
        jvp: impl Fn(&[Value], &[Value], &Value) -> Value,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|v| match v {
                Value::Real(m) => tape.input(m.clone()),
                Value::Complex(m) => tape.input_complex(m.clone()),
            })
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let y = tape.value(out).clone();
        let w = random_like(&y, &mut rng);
        let grads = tape.backward_from(out, w.clone()).unwrap();
        let lhs = inner(&jvp(inputs, tangents, &y), &w);
        let rhs: f64 = vars
            .iter()
            .zip(tangents)
            .map(|(&v, t)| inner(t, grads.get(v).expect("input reached")))
            .sum();
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
            "lhs {lhs} rhs {rhs}"
        );
    }

    fn r(v: &Value) -> &Matrix<f64> {
        v.as_real().unwrap()
    }

    fn c(v: &Value) -> &Matrix<Complex64> {
        v.as_complex().unwrap()
    }

    fn zip(a: &Matrix<f64>, b: &Matrix<f64>, f: impl Fn(f64, f64) -> f64) -> Matrix<f64> {
        Matrix::from_vec(
            a.rows(),
            a.cols(),
            a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .unwrap()
    }

    fn zip3(a: &Matrix<f64>, b: &Matrix<f64>, d: &Matrix<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Matrix<f64> {
        Matrix::from_vec(
            a.rows(),
            a.cols(),
            (0..a.len()).map(|i| f(a.as_slice()[i], b.as_slice()[i], d.as_slice()[i])).collect(),
        )
        .unwrap()
    }

    fn one(x: f64) -> Value {
        Value::Real(Matrix::from_vec(1, 1, vec![x]).unwrap())
    }

    fn plan() -> Arc<StftPlan> {
        Arc::new(StftPlan::new(StftConfig::new(12, 4, 16, WindowKind::PeriodicHann).unwrap()).unwrap())
    }

    #[test]
    fn elementwise_binary_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rnd(3, 4, &mut rng), pos(3, 4, &mut rng));
        let (va, vb) = (rnd(3, 4, &mut rng), rnd(3, 4, &mut rng));
        let x = [Value::Real(a), Value::Real(b)];
        let t = [Value::Real(va), Value::Real(vb)];
        dot_test(&x, &t, |tp, v| tp.add(v[0], v[1]), |_, t, _| Value::Real(zip(r(&t[0]), r(&t[1]), |p, q| p + q)));
        dot_test(&x, &t, |tp, v| tp.sub(v[0], v[1]), |_, t, _| Value::Real(zip(r(&t[0]), r(&t[1]), |p, q| p - q)));
        dot_test(
            &x,
            &t,
            |tp, v| tp.mul(v[0], v[1]),
            |x, t, _| {
                let left = zip(r(&t[0]), r(&x[1]), |p, q| p * q);
                let right = zip(r(&x[0]), r(&t[1]), |p, q| p * q);
                Value::Real(zip(&left, &right, |p, q| p + q))
            },
        );
        dot_test(
            &x,
            &t,
            |tp, v| tp.div(v[0], v[1]),
            |x, t, _| {
                let left = zip(r(&t[0]), r(&x[1]), |p, q| p / q);
                let right = zip3(r(&x[0]), r(&x[1]), r(&t[1]), |a, b, vb| -a * vb / (b * b));
                Value::Real(zip(&left, &right, |p, q| p + q))
            },
        );
        dot_test(
            &x,
            &t,
            |tp, v| tp.dot(v[0], v[1]),
            |x, t, _| one(inner(&t[0], &x[1]) + inner(&x[0], &t[1])),
        );
    }

    #[test]
    fn elementwise_unary_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rnd(4, 5, &mut rng);
        let p = pos(4, 5, &mut rng);
        let v = rnd(4, 5, &mut rng);
        let x = [Value::Real(a.clone())];
        let t = [Value::Real(v.clone())];
        dot_test(&x, &t, |tp, v| tp.scale(v[0], -2.5), |_, t, _| Value::Real(r(&t[0]).map(|q| -2.5 * q)));
        dot_test(&x, &t, |tp, v| tp.tanh(v[0]), |_, t, y| Value::Real(zip(r(&t[0]), r(y), |q, y| q * (1.0 - y * y))));
        dot_test(&x, &t, |tp, v| tp.sigmoid(v[0]), |_, t, y| Value::Real(zip(r(&t[0]), r(y), |q, y| q * y * (1.0 - y))));
        dot_test(&x, &t, |tp, v| tp.exp(v[0]), |_, t, y| Value::Real(zip(r(&t[0]), r(y), |q, y| q * y)));
        dot_test(
            &[Value::Real(p.clone())],
            &t,
            |tp, v| tp.log10(v[0]),
            |x, t, _| Value::Real(zip(r(&t[0]), r(&x[0]), |q, x| q / (x * LN_10))),
        );
        dot_test(
            &x,
            &t,
            |tp, v| tp.clamp(v[0], -0.3, 0.4),
            |x, t, _| Value::Real(zip(r(&t[0]), r(&x[0]), |q, x| if x > -0.3 && x < 0.4 { q } else { 0.0 })),
        );
        dot_test(&x, &t, |tp, v| tp.sum(v[0]), |_, t, _| one(r(&t[0]).sum()));
        dot_test(&x, &t, |tp, v| tp.mean(v[0]), |_, t, _| one(r(&t[0]).sum() / 20.0));
        dot_test(&x, &t, |tp, v| tp.norm_sq(v[0]), |x, t, _| one(2.0 * inner(&x[0], &t[0])));
        dot_test(&x, &t, |tp, v| tp.transpose(v[0]), |_, t, _| Value::Real(r(&t[0]).transpose()));
        dot_test(
            &x,
            &t,
            |tp, v| tp.softmax(v[0]),
            |_, t, y| {
                let (y, v) = (r(y), r(&t[0]));
                Value::Real(Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                    let s: f64 = y.row(i).iter().zip(v.row(i)).map(|(a, b)| a * b).sum();
                    y[(i, j)] * (v[(i, j)] - s)
                }))
            },
        );
        let scale = [0.5, -1.0, 2.0, 3.0, 0.1];
        let shift = [1.0, 2.0, 3.0, 4.0, 5.0];
        dot_test(
            &x,
            &t,
            |tp, v| tp.affine_cols(v[0], &scale, &shift),
            |_, t, _| Value::Real(Matrix::from_fn(4, 5, |i, j| r(&t[0])[(i, j)] * scale[j])),
        );
        dot_test(&x, &t, |tp, v| tp.row(v[0], 2), |_, t, _| {
            Value::Real(Matrix::from_vec(1, 5, r(&t[0]).row(2).to_vec()).unwrap())
        });
    }

    #[test]
    fn structural_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, s) = (rnd(3, 4, &mut rng), rnd(4, 2, &mut rng), rnd(1, 1, &mut rng));
        let (va, vb, vs) = (rnd(3, 4, &mut rng), rnd(4, 2, &mut rng), rnd(1, 1, &mut rng));
        dot_test(
            &[Value::Real(a.clone()), Value::Real(b.clone())],
            &[Value::Real(va.clone()), Value::Real(vb.clone())],
            |tp, v| tp.matmul(v[0], v[1]),
            |x, t, _| {
                let p = r(&t[0]).matmul(r(&x[1])).unwrap();
                let q = r(&x[0]).matmul(r(&t[1])).unwrap();
                Value::Real(zip(&p, &q, |u, w| u + w))
            },
        );
        dot_test(
            &[Value::Real(s.clone()), Value::Real(a.clone())],
            &[Value::Real(vs.clone()), Value::Real(va.clone())],
            |tp, v| tp.scale_by(v[0], v[1]),
            |x, t, _| {
                let (k, dk) = (r(&x[0]).as_slice()[0], r(&t[0]).as_slice()[0]);
                Value::Real(zip(r(&x[1]), r(&t[1]), |x, v| dk * x + k * v))
            },
        );
        let c3 = rnd(3, 2, &mut rng);
        let vc3 = rnd(3, 2, &mut rng);
        dot_test(
            &[Value::Real(a.clone()), Value::Real(c3.clone())],
            &[Value::Real(va.clone()), Value::Real(vc3.clone())],
            |tp, v| tp.concat_cols(v),
            |_, t, _| {
                let (p, q) = (r(&t[0]), r(&t[1]));
                Value::Real(Matrix::from_fn(3, 6, |i, j| if j < 4 { p[(i, j)] } else { q[(i, j - 4)] }))
            },
        );
        let d = rnd(2, 4, &mut rng);
        let vd = rnd(2, 4, &mut rng);
        dot_test(
            &[Value::Real(a), Value::Real(d)],
            &[Value::Real(va), Value::Real(vd)],
            |tp, v| tp.stack_rows(v),
            |_, t, _| {
                let mut data = r(&t[0]).as_slice().to_vec();
                data.extend_from_slice(r(&t[1]).as_slice());
                Value::Real(Matrix::from_vec(5, 4, data).unwrap())
            },
        );
    }

    #[test]
    fn complex_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = crnd(3, 5, &mut rng);
        let dz = crnd(3, 5, &mut rng);
        let m = pos(3, 5, &mut rng);
        let dm = rnd(3, 5, &mut rng);
        let a = rnd(3, 5, &mut rng);
        let da = rnd(3, 5, &mut rng);
        dot_test(
            &[Value::Complex(z.clone())],
            &[Value::Complex(dz.clone())],
            |tp, v| tp.modulus(v[0]),
            |x, t, _| {
                let (z, dz) = (c(&x[0]), c(&t[0]));
                Value::Real(Matrix::from_fn(3, 5, |i, j| (z[(i, j)].conj() * dz[(i, j)]).re / z[(i, j)].norm()))
            },
        );
        dot_test(
            &[Value::Complex(z.clone())],
            &[Value::Complex(dz.clone())],
            |tp, v| tp.phasor(v[0]),
            |x, t, _| {
                let (z, dz) = (c(&x[0]), c(&t[0]));
                Value::Complex(Matrix::from_fn(3, 5, |i, j| {
                    let (z, dz) = (z[(i, j)], dz[(i, j)]);
                    let r = z.norm();
                    dz / r - z * ((z.conj() * dz).re / (r * r * r))
                }))
            },
        );
        let u = z.map(|z| z / z.norm());
        dot_test(
            &[Value::Real(m.clone()), Value::Complex(u.clone())],
            &[Value::Real(dm.clone()), Value::Complex(dz.clone())],
            |tp, v| tp.polar(v[0], v[1]),
            |x, t, _| {
                let (m, u, dm, du) = (r(&x[0]), c(&x[1]), r(&t[0]), c(&t[1]));
                Value::Complex(Matrix::from_fn(3, 5, |i, j| u[(i, j)] * dm[(i, j)] + du[(i, j)] * m[(i, j)]))
            },
        );
        dot_test(
            &[Value::Real(a)],
            &[Value::Real(da)],
            |tp, v| tp.to_complex(v[0]),
            |_, t, _| Value::Complex(r(&t[0]).map(|&q| Complex64::new(q, 0.0))),
        );
    }

    #[test]
    fn fft_and_framing_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = plan();
        let frames = rnd(4, 16, &mut rng);
        let vf = rnd(4, 16, &mut rng);
        let p = plan.clone();
        dot_test(
            &[Value::Real(frames.clone())],
            &[Value::Real(vf.clone())],
            |tp, v| tp.rfft(v[0], &p),
            |_, t, _| Value::Complex(plan.rfft_rows(r(&t[0]))),
        );
        let spec = crnd(4, 9, &mut rng);
        let vs = crnd(4, 9, &mut rng);
        dot_test(
            &[Value::Complex(spec)],
            &[Value::Complex(vs)],
            |tp, v| tp.irfft(v[0], &p),
            |_, t, _| Value::Real(plan.irfft_rows(c(&t[0]))),
        );
        let sig = rnd(1, 27, &mut rng);
        let vsig = rnd(1, 27, &mut rng);
        dot_test(
            &[Value::Real(sig)],
            &[Value::Real(vsig)],
            |tp, v| tp.frame(v[0], &p),
            |_, t, _| Value::Real(plan.frame_signal(r(&t[0]).as_slice()).unwrap()),
        );
        dot_test(
            &[Value::Real(frames)],
            &[Value::Real(vf)],
            |tp, v| tp.overlap_add(v[0], &p),
            |_, t, _| {
                let o = plan.overlap_add(r(&t[0]));
                Value::Real(Matrix::from_vec(1, o.len(), o).unwrap())
            },
        );
    }

    #[test]
    fn fft_inner_product_against_naive_dft() {
        // ⟨FFT(x), y⟩ = ⟨x, FFTᴴ(y)⟩ with FFTᴴ evaluated as an explicit sum
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = plan();
        let x = rnd(1, 16, &mut rng);
        let y = crnd(1, 9, &mut rng);
        let fx = plan.rfft_rows(&x);
        let lhs: f64 = fx.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let adj: Vec<f64> = (0..16)
            .map(|n| {
                (0..9)
                    .map(|k| {
                        let th = -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0;
                        let e = Complex64::new(th.cos(), th.sin());
                        (e.conj() * y.as_slice()[k]).re
                    })
                    .sum()
            })
            .collect();
        let rhs: f64 = x.as_slice().iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let mut tape = Tape::new();
        let xv = tape.input(x);
        let f = tape.rfft(xv, &plan).unwrap();
        let g = tape.backward_from(f, Value::Complex(y)).unwrap().real(xv);
        for (a, b) in g.as_slice().iter().zip(&adj) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn trivial_gradients() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap().real(x);
        assert_eq!(g.as_slice(), &[1.0, 1.0, 1.0]);

        let n = tape.norm_sq(x).unwrap();
        let g = tape.backward(n).unwrap().real(x);
        assert_eq!(g.as_slice(), &[2.0, -4.0, 1.0]);

        let id = tape.input(Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        assert_eq!(tape.backward(id).unwrap().real(id).as_slice(), &[1.0]);

        let z = tape.input_complex(Matrix::from_vec(1, 1, vec![Complex64::new(3.0, 4.0)]).unwrap());
        let m = tape.modulus(z).unwrap();
        let g = tape.backward(m).unwrap().complex(z);
        assert!((g.as_slice()[0].re - 0.6).abs() < 1e-15);
        assert!((g.as_slice()[0].im - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_magnitude_subgradient_is_zero() {
        let mut tape = Tape::new();
        let z = tape.input_complex(Matrix::from_vec(1, 2, vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 1.0)]).unwrap());
        let m = tape.modulus(z).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().complex(z);
        assert_eq!(g.as_slice()[0], Complex64::new(0.0, 0.0));
        let u = tape.phasor(z).unwrap();
        assert_eq!(tape.complex(u).unwrap().as_slice()[0], Complex64::new(1.0, 0.0));
        let re = tape.modulus(u).unwrap();
        let s = tape.sum(re).unwrap();
        let g = tape.backward(s).unwrap().complex(z);
        assert_eq!(g.as_slice()[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn unreachable_inputs_get_zero() {
        let mut tape = Tape::new();
        let a = tape.input(Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap());
        let b = tape.input(Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap());
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.real(b), Matrix::zeros(1, 3));
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::new();
        let k = tape.constant(Matrix::from_vec(1, 2, vec![2.0, 3.0]).unwrap());
        let x = tape.input(Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap());
        let p = tape.mul(k, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.real(x).as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.input(Matrix::zeros(2, 3));
        let b = tape.input(Matrix::zeros(3, 2));
        assert!(matches!(tape.add(a, b), Err(crate::error::Error::InvalidInput(_))));
        assert!(tape.mul(a, b).is_err());
        assert!(tape.dot(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.concat_cols(&[a, b]).is_err());
        assert!(tape.modulus(a).is_err());
        assert!(matches!(tape.backward(a), Err(crate::error::Error::InvalidInput(_))));
        let plan = plan();
        assert!(tape.rfft(a, &plan).is_err());
        assert!(tape.frame(b, &plan).is_err());
    }
}
