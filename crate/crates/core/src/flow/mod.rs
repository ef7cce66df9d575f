//! Anchor flow estimation, bi-prediction flow approximation and the
//! learned refinement subnet.

mod estimate;
mod refine;

pub use estimate::{estimate_anchor_flow, FileFlowProvider, FlowProvider, PyramidalLk};
pub use refine::{init_refine, refine_flows, refine_flows_var, RefineConfig};

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::frame::FlowField;
use crate::numerics::{Scalar, Tensor, Var};

/// Bi-prediction model `M_{n1,n2}`, stored with `n1 <= n2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelId {
    n1: u8,
    n2: u8,
}

impl ModelId {
    pub const M12: ModelId = ModelId { n1: 1, n2: 2 };
    pub const M33: ModelId = ModelId { n1: 3, n2: 3 };
    pub const M66: ModelId = ModelId { n1: 6, n2: 6 };
    pub const ALL: [ModelId; 3] = [ModelId::M12, ModelId::M33, ModelId::M66];

    /// Normalizes `(n1, n2)` to `n1 <= n2` and rejects unsupported pairs.
    pub fn new(n1: u32, n2: u32) -> Result<ModelId> {
        let (a, b) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
        match (a, b) {
            (1, 2) => Ok(ModelId::M12),
            (3, 3) => Ok(ModelId::M33),
            (6, 6) => Ok(ModelId::M66),
            _ => Err(Error::InvalidArgument(format!("no bi-prediction model for distances ({n1},{n2})"))),
        }
    }

    pub fn n1(self) -> u32 {
        self.n1 as u32
    }

    pub fn n2(self) -> u32 {
        self.n2 as u32
    }

    /// Weight-bundle prefix, e.g. `m12`.
    pub fn tag(self) -> &'static str {
        match (self.n1, self.n2) {
            (1, 2) => "m12",
            (3, 3) => "m33",
            _ => "m66",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{},{}", self.n1, self.n2)
    }
}

/// Actual distances of the current frame to its past and future references.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefDistances {
    pub past: u32,
    pub future: u32,
}

impl RefDistances {
    pub fn new(past: u32, future: u32) -> Result<Self> {
        ModelId::new(past, future)?;
        Ok(RefDistances { past, future })
    }

    pub fn model(self) -> ModelId {
        ModelId::new(self.past, self.future).expect("validated on construction")
    }

    /// `true` for the `(2,1)` position, coded by the `(1,2)` model.
    pub fn is_mirror(self) -> bool {
        self.past > self.future
    }
}

impl From<ModelId> for RefDistances {
    fn from(m: ModelId) -> Self {
        RefDistances { past: m.n1(), future: m.n2() }
    }
}

/// Flows from the current frame to its two references.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub to_past: FlowField,
    pub to_future: FlowField,
}

impl FlowPair {
    pub fn new(to_past: FlowField, to_future: FlowField) -> Result<Self> {
        if !to_past.same_size(&to_future) {
            return Err(shape_err!(
                "flow pair sizes differ: {}x{} vs {}x{}",
                to_past.width(),
                to_past.height(),
                to_future.width(),
                to_future.height()
            ));
        }
        Ok(FlowPair { to_past, to_future })
    }

    pub fn width(&self) -> usize {
        self.to_past.width()
    }

    pub fn height(&self) -> usize {
        self.to_past.height()
    }

    /// `[1,4,H,W]`: to-past `(dx,dy)` then to-future `(dx,dy)`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = self.to_past.data().to_vec();
        data.extend_from_slice(self.to_future.data());
        Tensor::new(&[1, 4, self.height(), self.width()], data).expect("flow pair layout")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 4 {
            return Err(shape_err!("flow pair tensor must be [1,4,H,W], got {:?}", t.shape()));
        }
        let half = 2 * h * w;
        FlowPair::new(
            FlowField::new(w, h, t.data()[..half].to_vec())?,
            FlowField::new(w, h, t.data()[half..].to_vec())?,
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FlowPair> {
        FlowPair::new(self.to_past.crop(x0, y0, w, h)?, self.to_future.crop(x0, y0, w, h)?)
    }
}

/// Current-to-reference flows from the two anchor flows, assuming smooth
/// motion.
///
/// `f_fwd` is `F_{past->future}` and `f_bwd` is `F_{future->past}`. The
/// `(2,1)` position is handled by time reversal: the future reference plays
/// the past role and the anchor flows swap.
pub fn approximate_bipred_flows(f_fwd: &FlowField, f_bwd: &FlowField, dist: RefDistances) -> Result<FlowPair> {
    if !f_fwd.same_size(f_bwd) {
        return Err(shape_err!("anchor flows differ in size"));
    }
    let model = ModelId::new(dist.past, dist.future)?;
    let (fwd, bwd) = if dist.is_mirror() { (f_bwd, f_fwd) } else { (f_fwd, f_bwd) };
    // Integer numerators over a common denominator keep the worked
    // examples exact in f32.
    let (near, far) = if model == ModelId::M12 {
        (fwd.combine(-2.0, bwd, 1.0)?.scaled_div(9.0), fwd.combine(4.0, bwd, -2.0)?.scaled_div(9.0))
    } else {
        (fwd.combine(-1.0, bwd, 1.0)?.scaled_div(4.0), fwd.combine(1.0, bwd, -1.0)?.scaled_div(4.0))
    };
    if dist.is_mirror() {
        FlowPair::new(far, near)
    } else {
        FlowPair::new(near, far)
    }
}

/// Flow loss over a batch: `1/(2N) * sum_k sum_p (|dF_past|_1 + |dF_future|_1)`.
pub fn flow_loss(pred: &[FlowPair], target: &[FlowPair]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("flow loss needs a non-empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(shape_err!("flow loss batch sizes {} and {} differ", pred.len(), target.len()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in [(&p.to_past, &t.to_past), (&p.to_future, &t.to_future)] {
            if !a.same_size(b) {
                return Err(shape_err!("flow loss operands differ in size"));
            }
            total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
        }
    }
    Ok(total / (2.0 * pred.len() as f64))
}

/// Tape form of [`flow_loss`] over `[N,4,H,W]` stacks.
pub fn flow_loss_var<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = pred.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("flow loss needs a non-empty batch".into()));
    }
    Ok(pred.sub(target)?.abs().sum().scale(1.0 / (2.0 * n as f64)))
}

/// Mean Euclidean distance between per-pixel flow vectors.
pub fn endpoint_error(pred: &FlowField, truth: &FlowField) -> Result<f64> {
    if !pred.same_size(truth) {
        return Err(shape_err!("endpoint error operands differ in size"));
    }
    let hw = pred.width() * pred.height();
    if hw == 0 {
        return Ok(0.0);
    }
    let (p, t) = (pred.data(), truth.data());
    let sum: f64 = (0..hw)
        .map(|i| {
            let dx = (p[i] - t[i]) as f64;
            let dy = (p[hw + i] - t[hw + i]) as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(sum / hw as f64)
}

#[cfg(test)]
mod tests;
