use crate::error::{Error, Result};
use crate::flow::{ModelId, RefDistances};

/// The only GOP length supported by the bitstream format.
pub const GOP_SIZE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Bipred,
}

/// One coded frame of a GOP. Offsets are 1-based; offset `gop_size + 1` is
/// the next GOP's first frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GopStep {
    pub offset: usize,
    pub frame_type: FrameType,
    pub model: Option<ModelId>,
    pub past_ref: Option<usize>,
    pub future_ref: Option<usize>,
}

impl GopStep {
    fn intra(offset: usize) -> Self {
        GopStep { offset, frame_type: FrameType::Intra, model: None, past_ref: None, future_ref: None }
    }

    fn bipred(offset: usize, past: usize, future: usize) -> Self {
        let dist = RefDistances::new((offset - past) as u32, (future - offset) as u32).expect("plan uses supported distances");
        GopStep { offset, frame_type: FrameType::Bipred, model: Some(dist.model()), past_ref: Some(past), future_ref: Some(future) }
    }

    /// Reference distances; `None` for intra steps.
    pub fn distances(&self) -> Option<RefDistances> {
        match (self.past_ref, self.future_ref) {
            (Some(p), Some(f)) => Some(RefDistances { past: (self.offset - p) as u32, future: (f - self.offset) as u32 }),
            _ => None,
        }
    }
}

/// Coding order of one GOP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopPlan {
    pub gop_size: usize,
    pub steps: Vec<GopStep>,
}

/// Hierarchical bi-directional plan: anchors 1 and 13, then 7, then 4 and
/// 10, then the remaining frames in ascending pairs.
pub fn plan_gop(gop_size: usize) -> Result<GopPlan> {
    if gop_size != GOP_SIZE {
        return Err(Error::InvalidArgument(format!("GOP size {gop_size} is not supported (only {GOP_SIZE})")));
    }
    let mut steps = vec![GopStep::intra(1), GopStep::intra(13), GopStep::bipred(7, 1, 13), GopStep::bipred(4, 1, 7), GopStep::bipred(10, 7, 13)];
    for (past, future) in [(1, 4), (4, 7), (7, 10), (10, 13)] {
        steps.push(GopStep::bipred(past + 1, past, future));
        steps.push(GopStep::bipred(past + 2, past, future));
    }
    let plan = GopPlan { gop_size, steps };
    plan.validate()?;
    Ok(plan)
}

impl GopPlan {
    /// Checks that references precede their users, offsets are in range and
    /// every frame is coded exactly once.
    pub fn validate(&self) -> Result<()> {
        let last = self.gop_size + 1;
        let mut coded = vec![false; last + 1];
        for (i, s) in self.steps.iter().enumerate() {
            if s.offset == 0 || s.offset > last {
                return Err(Error::InvalidArgument(format!("step {i} offset {} outside 1..={last}", s.offset)));
            }
            if coded[s.offset] {
                return Err(Error::InvalidArgument(format!("offset {} coded twice", s.offset)));
            }
            match s.frame_type {
                FrameType::Intra => {
                    if s.past_ref.is_some() || s.future_ref.is_some() || s.model.is_some() {
                        return Err(Error::InvalidArgument(format!("intra step {} has references", s.offset)));
                    }
                }
                FrameType::Bipred => {
                    let (p, f) = match (s.past_ref, s.future_ref) {
                        (Some(p), Some(f)) => (p, f),
                        _ => return Err(Error::InvalidArgument(format!("bipred step {} lacks references", s.offset))),
                    };
                    if !(p < s.offset && s.offset < f && f <= last) {
                        return Err(Error::InvalidArgument(format!("step {} references {p},{f} do not bracket it", s.offset)));
                    }
                    if !coded[p] || !coded[f] {
                        return Err(Error::InvalidArgument(format!("step {} uses a reference not yet coded", s.offset)));
                    }
                    let dist = RefDistances::new((s.offset - p) as u32, (f - s.offset) as u32)?;
                    if s.model != Some(dist.model()) {
                        return Err(Error::InvalidArgument(format!("step {} model does not match its distances", s.offset)));
                    }
                }
            }
            coded[s.offset] = true;
        }
        if let Some(missing) = (1..=last).find(|&o| !coded[o]) {
            return Err(Error::InvalidArgument(format!("offset {missing} is never coded")));
        }
        Ok(())
    }
}

/// One frame of a whole-sequence coding order, 0-based display indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceStep {
    pub frame: usize,
    pub gop: usize,
    pub step: GopStep,
}

/// Number of frames actually coded for `frames` input frames: whole GOPs
/// plus the closing anchor.
pub fn padded_length(frames: usize, gop_size: usize) -> usize {
    if frames <= 1 {
        return frames;
    }
    (frames - 1).div_ceil(gop_size) * gop_size + 1
}

/// Coding order over a padded sequence. Each GOP after the first reuses the
/// previous GOP's closing anchor as its offset-1 frame.
pub fn sequence_order(plan: &GopPlan, frames: usize) -> Vec<SequenceStep> {
    let total = padded_length(frames, plan.gop_size);
    if total == 0 {
        return Vec::new();
    }
    let mut order = vec![SequenceStep { frame: 0, gop: 0, step: plan.steps[0] }];
    let gops = (total - 1) / plan.gop_size;
    for g in 0..gops {
        let base = g * plan.gop_size;
        for s in plan.steps.iter().filter(|s| s.offset != 1) {
            order.push(SequenceStep { frame: base + s.offset - 1, gop: g, step: *s });
        }
    }
    order
}
