//! Single-line JSON reports with numbers at six significant digits.

use std::fmt::Write as _;

use crate::error::Error;

/// Formats `x` with six significant digits; non-finite values become `null`.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let s = format!("{:.*}", (5 - mag) as usize, x);
        // rounding can carry into a new digit (9.999995 -> 10.00000)
        let digits = s.trim_start_matches('-').replace('.', "");
        if digits.trim_start_matches('0').len() > 6 && mag < 5 {
            return format!("{:.*}", (4 - mag).max(0) as usize, x);
        }
        s
    } else {
        format!("{x:.5e}")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    fields: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num(mut self, key: &str, x: f64) -> Self {
        self.fields.push((key.into(), format_number(x)));
        self
    }

    pub fn opt_num(self, key: &str, x: Option<f64>) -> Self {
        match x {
            Some(x) => self.num(key, x),
            None => self.raw(key, "null"),
        }
    }

    pub fn int(mut self, key: &str, n: u64) -> Self {
        self.fields.push((key.into(), n.to_string()));
        self
    }

    pub fn flag(self, key: &str, b: bool) -> Self {
        self.raw(key, if b { "true" } else { "false" })
    }

    pub fn text(mut self, key: &str, s: &str) -> Self {
        self.fields.push((key.into(), serde_json::to_string(s).expect("string serializes")));
        self
    }

    pub fn nums(mut self, key: &str, xs: &[f64]) -> Self {
        let body: Vec<String> = xs.iter().map(|&x| format_number(x)).collect();
        self.fields.push((key.into(), format!("[{}]", body.join(","))));
        self
    }

    /// Nested object.
    pub fn object(self, key: &str, inner: Report) -> Self {
        let line = inner.line();
        self.raw(key, &line)
    }

    pub fn objects(self, key: &str, inner: Vec<Report>) -> Self {
        let body: Vec<String> = inner.into_iter().map(|r| r.line()).collect();
        self.raw(key, &format!("[{}]", body.join(",")))
    }

    fn raw(mut self, key: &str, json: &str) -> Self {
        self.fields.push((key.into(), json.into()));
        self
    }

    pub fn line(&self) -> String {
        let mut s = String::from("{");
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:{v}", serde_json::to_string(k).expect("key serializes"));
        }
        s.push('}');
        s
    }
}

pub fn error_line(e: &Error) -> String {
    Report::new().text("error", e.kind()).text("message", &e.to_string()).line()
}
