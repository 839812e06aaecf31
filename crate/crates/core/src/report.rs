//! Layer-by-layer parameter accounting.

use std::fmt::Write;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    /// Output shape as a function of the input extent `K`.
    pub output: String,
    pub filter: String,
    /// Convolution weights and biases.
    pub params: usize,
    /// Scale, shift, running mean and running variance.
    pub bn_params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerReport {
    pub rows: Vec<LayerRow>,
    pub total_without_bn: usize,
    pub total_with_bn: usize,
}

/// `1234567 → "1,234,567"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl LayerReport {
    pub fn new(rows: Vec<LayerRow>) -> Self {
        let total_without_bn = rows.iter().map(|r| r.params).sum();
        let total_with_bn = total_without_bn + rows.iter().map(|r| r.bn_params).sum::<usize>();
        Self { rows, total_without_bn, total_with_bn }
    }

    pub fn row(&self, name: &str) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn bn_total(&self) -> usize {
        self.total_with_bn - self.total_without_bn
    }

    /// Bytes needed at 4 bytes per parameter.
    pub fn size_bytes(&self) -> usize {
        4 * self.total_with_bn
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<20} {:<24} {:>10} {:>8}", "layer", "output", "filter", "params", "bn");
        for r in &self.rows {
            let fmt = |n: usize| if n == 0 { String::new() } else { thousands(n) };
            let _ = writeln!(
                s,
                "{:<14} {:<20} {:<24} {:>10} {:>8}",
                r.name,
                r.output,
                r.filter,
                fmt(r.params),
                fmt(r.bn_params)
            );
        }
        let _ = writeln!(s, "Batch normalization parameters: {}", thousands(self.bn_total()));
        let size = self.size_bytes();
        let _ = writeln!(s, "Size at 4 bytes per parameter: {} bytes ({:.1} MB)", thousands(size), size as f64 / 1e6);
        let _ = writeln!(s, "Total # of parameters: {}", thousands(self.total_without_bn));
        let _ = writeln!(
            s,
            "Total # of parameters including batch normalization layers: {}",
            thousands(self.total_with_bn)
        );
        s
    }
}
