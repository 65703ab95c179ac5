//! Named traversal of learnable parameters.

use super::ops::{LinearWeights, NormWeights};
use super::Tensor;

/// Receives every parameter of a weights struct with its dotted name.
pub trait ParamVisitor {
    fn tensor(&mut self, name: &str, t: &mut Tensor);
    fn scalar(&mut self, name: &str, v: &mut f64);
}

/// Weights structs expose their parameters in a fixed order.
pub trait Parameters {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor);
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for LinearWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.tensor(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.tensor(&join(prefix, "bias"), b);
        }
    }
}

impl Parameters for NormWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.tensor(&join(prefix, "gamma"), &mut self.gamma);
        v.tensor(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Collects `(name, shape)` pairs; handy for manifests and tests.
#[derive(Default)]
pub struct ShapeCollector(pub Vec<(String, Vec<usize>)>);

impl ParamVisitor for ShapeCollector {
    fn tensor(&mut self, name: &str, t: &mut Tensor) {
        self.0.push((name.to_string(), t.shape().to_vec()));
    }

    fn scalar(&mut self, name: &str, _v: &mut f64) {
        self.0.push((name.to_string(), Vec::new()));
    }
}

/// Number of scalar parameters in `w`.
pub fn count_parameters(w: &mut dyn Parameters) -> usize {
    let mut c = ShapeCollector::default();
    w.visit("", &mut c);
    c.0.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}
