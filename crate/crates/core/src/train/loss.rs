use super::{AntLossMode, TrainConfig};
use crate::error::{Error, Result};
use crate::net::Trainable;
use crate::net::{argmax, BoundModel, HotspotModel};
use crate::tensor::{BatchStats, BnMode, GradCheckReport, Real, Tape, Tensor, Var, GRAD_CHECK_FLOOR};

/// One training chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `T×3×H×W` frames.
    pub clip: Tensor<T>,
    pub action: usize,
    pub object: usize,
    /// Index into [`TrainSet::inactive`] of the paired inactive image.
    pub inactive: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet<T> {
    pub samples: Vec<Sample<T>>,
    /// `3×H×W` inactive images.
    pub inactive: Vec<Tensor<T>>,
    /// Object class of every inactive image.
    pub inactive_object: Vec<usize>,
}

impl<T: Real> TrainSet<T> {
    pub fn validate(&self, actions: usize) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if self.inactive.len() != self.inactive_object.len() {
            return Err(Error::InvalidArgument("inactive images and their objects differ in count".into()));
        }
        for s in &self.samples {
            if s.action >= actions {
                return Err(Error::LabelOutOfRange { label: s.action, classes: actions });
            }
            if s.inactive.is_some_and(|i| i >= self.inactive.len()) {
                return Err(Error::InvalidArgument("sample references a missing inactive image".into()));
            }
        }
        Ok(())
    }
}

/// Frame at which the true action's softmax probability peaks; the
/// earliest frame wins ties.
pub fn select_active_frame<T: Real>(step_logits: &[Tensor<T>], action: usize) -> Result<usize> {
    if step_logits.is_empty() {
        return Err(Error::InvalidArgument("no steps to select from".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (t, logits) in step_logits.iter().enumerate() {
        let z = logits.to_f64_vec();
        if action >= z.len() {
            return Err(Error::LabelOutOfRange { label: action, classes: z.len() });
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let p = (z[action] - max).exp() / total;
        if p > best.1 {
            best = (t, p);
        }
    }
    Ok(best.0)
}

fn check_pair(tape: &Tape<impl Real>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Euclidean distance between an anticipated pooled embedding and the
/// pooled active-frame target.
pub fn loss_ant_l2<T: Real>(tape: &mut Tape<T>, anticipated: Var, target: Var) -> Result<Var> {
    check_pair(tape, anticipated, target, "loss_ant_l2")?;
    let diff = tape.sub(anticipated, target)?;
    Ok(tape.norm(diff))
}

/// `max(0, d(a, p) - d(a, n) + margin)` on L2-normalized pooled vectors.
pub fn loss_ant_triplet<T: Real>(
    tape: &mut Tape<T>,
    active: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::InvalidArgument(format!("triplet margin must be positive, got {margin}")));
    }
    check_pair(tape, active, positive, "loss_ant_triplet")?;
    check_pair(tape, active, negative, "loss_ant_triplet")?;
    let a = tape.normalize(active);
    let p = tape.normalize(positive);
    let n = tape.normalize(negative);
    let dp = tape.sub(a, p)?;
    let dp = tape.norm(dp);
    let dn = tape.sub(a, n)?;
    let dn = tape.norm(dn);
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    Ok(tape.relu(gap))
}

/// Batch means of the individual loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub ant: f64,
    pub aux: f64,
    pub items: usize,
    /// Items that had an inactive image and contributed to the
    /// anticipation and auxiliary terms.
    pub paired: usize,
    /// Items whose final-step prediction matched the label.
    pub correct: usize,
}

pub struct LossOutput<T> {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub bn_stats: Vec<BatchStats<T>>,
    /// Values of the detached distillation targets `P(x_t*)`, one per
    /// batch item.
    pub targets: Vec<Tensor<T>>,
}

fn concat_clips<T: Real>(clips: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let frame_shape = clips[0].shape()[1..].to_vec();
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(clips.len());
    for c in clips {
        if c.rank() != 4 || c.shape()[1..] != frame_shape[..] || c.shape()[0] == 0 {
            return Err(Error::shape("combined_loss", format!("clip shape {:?}", c.shape())));
        }
        lens.push(c.shape()[0]);
        data.extend_from_slice(c.data());
    }
    let mut shape = vec![lens.iter().sum()];
    shape.extend(frame_shape);
    Ok((Tensor::new(shape, data)?, lens))
}

/// The weighted sum of video classification, anticipation and auxiliary
/// losses, each averaged over the items it applies to.
///
/// `negatives[i]` names the inactive image used as the triplet negative for
/// `batch[i]`; it is ignored in L2 mode.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &HotspotModel<T>,
    bound: &BoundModel,
    data: &TrainSet<T>,
    batch: &[usize],
    negatives: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<LossOutput<T>> {
    combined_loss_frozen(tape, model, bound, data, batch, negatives, cfg, None)
}

/// [`combined_loss`] with the distillation targets replaced by `frozen`
/// values when given. Freezing them makes the scalar a function whose
/// derivative is exactly what backward computes, which is what a
/// finite-difference check needs.
#[allow(clippy::too_many_arguments)]
fn combined_loss_frozen<T: Real>(
    tape: &mut Tape<T>,
    model: &HotspotModel<T>,
    bound: &BoundModel,
    data: &TrainSet<T>,
    batch: &[usize],
    negatives: &[Option<usize>],
    cfg: &TrainConfig,
    frozen: Option<&[Tensor<T>]>,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let w = cfg.weights;
    let items: Vec<&Sample<T>> = batch.iter().map(|&i| &data.samples[i]).collect();
    let clips: Vec<&Tensor<T>> = items.iter().map(|s| &s.clip).collect();
    let (frames, lens) = concat_clips(&clips)?;
    let frames = tape.constant(frames);
    let features = model.encode(tape, bound, frames)?;
    let pooled = model.pool(tape, features)?;

    let lstm = bound.lstm();
    let (cw, cb) = bound.classifier();
    let mut cls_terms = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut correct = 0;
    let mut offset = 0;
    for (s, &len) in items.iter().zip(&lens) {
        let mut state = model.zero_state(tape);
        let mut step_logits = Vec::with_capacity(len);
        for t in 0..len {
            let g = tape.select(pooled, offset + t)?;
            state = crate::tensor::lstm_step(tape, g, state, &lstm)?;
            step_logits.push(tape.linear(state.0, cw, Some(cb))?);
        }
        let last = *step_logits.last().expect("nonempty clip");
        if argmax(tape.value(last).data()) == s.action {
            correct += 1;
        }
        cls_terms.push(tape.softmax_cross_entropy(last, s.action)?);
        let values: Vec<Tensor<T>> = step_logits.iter().map(|&v| tape.value(v).clone()).collect();
        let t_star = select_active_frame(&values, s.action)?;
        let target = match frozen.and_then(|f| f.get(targets.len())) {
            Some(v) => tape.constant(v.clone()),
            None => {
                let g_star = tape.select(pooled, offset + t_star)?;
                tape.detach(g_star)
            }
        };
        targets.push(target);
        offset += len;
    }

    let mut ant_terms = Vec::new();
    let mut aux_terms = Vec::new();
    let mut bn_stats = Vec::new();
    let triplet = cfg.ant_loss == AntLossMode::Triplet;
    let paired: Vec<usize> = (0..items.len()).filter(|&i| items[i].inactive.is_some()).collect();
    if paired.len() < items.len() && w.uses_inactive() {
        log::debug!("{} batch items lack an inactive image", items.len() - paired.len());
    }
    if w.uses_inactive() && !paired.is_empty() {
        // Inactive images to encode: each paired item's own image, then
        // its triplet negative.
        let mut images: Vec<usize> = paired.iter().map(|&i| items[i].inactive.expect("paired")).collect();
        if triplet {
            for &i in &paired {
                let neg = negatives
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::InvalidArgument(format!("batch item {i} has no triplet negative")))?;
                images.push(neg);
            }
        }
        let stacked: Vec<Tensor<T>> = images.iter().map(|&j| data.inactive[j].clone()).collect();
        let x = tape.constant(Tensor::stack(&stacked)?);
        let x_i = model.encode(tape, bound, x)?;
        let (anticipated, stats) = if model.config.anticipation {
            model.anticipate(tape, bound, x_i, BnMode::Train)?
        } else {
            (x_i, Vec::new())
        };
        bn_stats = stats;
        let p = model.pool(tape, anticipated)?;
        for (k, &i) in paired.iter().enumerate() {
            let pk = tape.select(p, k)?;
            let term = if triplet {
                let neg = tape.select(p, paired.len() + k)?;
                loss_ant_triplet(tape, targets[i], pk, neg, cfg.margin)?
            } else {
                loss_ant_l2(tape, pk, targets[i])?
            };
            ant_terms.push(term);
            let logits = model.score_pooled(tape, bound, pk)?;
            aux_terms.push(tape.softmax_cross_entropy(logits, items[i].action)?);
        }
    }

    let mean_of = |tape: &mut Tape<T>, terms: &[Var]| -> Option<Var> {
        let (&first, rest) = terms.split_first()?;
        let mut acc = first;
        for &t in rest {
            acc = tape.add(acc, t).expect("scalar terms");
        }
        Some(tape.scale(acc, 1.0 / terms.len() as f64))
    };
    let cls = mean_of(tape, &cls_terms).expect("nonempty batch");
    let mut total = tape.scale(cls, w.cls);
    let mut breakdown = LossBreakdown {
        cls: tape.value(cls).item().to_f64_lossy(),
        items: items.len(),
        paired: ant_terms.len(),
        correct,
        ..LossBreakdown::default()
    };
    if let Some(ant) = mean_of(tape, &ant_terms) {
        breakdown.ant = tape.value(ant).item().to_f64_lossy();
        let s = tape.scale(ant, w.ant);
        total = tape.add(total, s)?;
    }
    if let Some(aux) = mean_of(tape, &aux_terms) {
        breakdown.aux = tape.value(aux).item().to_f64_lossy();
        let s = tape.scale(aux, w.aux);
        total = tape.add(total, s)?;
    }
    breakdown.total = tape.value(total).item().to_f64_lossy();
    let targets = targets.iter().map(|&v| tape.value(v).clone()).collect();
    Ok(LossOutput { total, breakdown, bn_stats, targets })
}

/// Compares the gradient of [`combined_loss`] with respect to every model
/// parameter against central differences with step `h`. The probes hold
/// the detached distillation targets at their unperturbed values.
/// Positions where a ReLU or norm changes state between the two probes are
/// excluded.
pub fn check_combined_loss_gradients(
    model: &HotspotModel<f64>,
    data: &TrainSet<f64>,
    batch: &[usize],
    negatives: &[Option<usize>],
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = combined_loss(&mut tape, model, &bound, data, batch, negatives, cfg)?;
    tape.backward(out.total)?;
    let analytic = model.params().collect_grads(&tape, bound.vars());
    let frozen = out.targets;

    let eval = |probe: &HotspotModel<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        tape.track_activation_pattern();
        let bound = probe.bind(&mut tape, false);
        let out = combined_loss_frozen(&mut tape, probe, &bound, data, batch, negatives, cfg, Some(&frozen))?;
        Ok((out.breakdown.total, tape.activation_pattern().unwrap_or_default().to_vec()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, compared: 0, excluded: 0 };
    let mut probe = model.clone();
    let mut flat = 0;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let x0 = model.params().tensors()[p].data()[i];
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x0 + h;
            let (fp, pat_p) = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x0 - h;
            let (fm, pat_m) = eval(&probe)?;
            probe.params_mut().tensors_mut()[p].data_mut()[i] = x0;
            if pat_p != pat_m {
                report.excluded += 1;
            } else {
                let numeric = (fp - fm) / (2.0 * h);
                let a = grad.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                report.compared += 1;
                if report.worst_index.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_index = Some(flat);
                }
            }
            flat += 1;
        }
    }
    Ok(report)
}
