//! Permutation-invariant training loss for a variable number of sources, and
//! SI-SDR based evaluation.
//!
//! With `M` outputs and `N ≤ M` reference sources, the loss searches all `M!`
//! assignments of outputs to sources. References beyond `N` are treated as
//! silent; their assigned outputs are pushed towards zero by a term softened
//! with `τ‖x‖²`.

use std::f64::consts::LN_10;

use crate::error::{invalid, Result};
use crate::tensor::{Axis, Graph, Shape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 1e-3;

/// Output channel assigned to each (real or silent) source slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    perm: Vec<usize>,
}

impl Assignment {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return invalid(format!("{perm:?} is not a permutation"));
            }
        }
        Ok(Self { perm })
    }

    /// Output index `p(n)` for source slot `n`.
    pub fn output_for(&self, n: usize) -> usize {
        self.perm[n]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    /// Only present when there are more outputs than sources.
    pub l2: Option<f64>,
    pub assignment: Assignment,
    pub n_sources: usize,
    pub n_outputs: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn energy(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn check_shapes<O: AsRef<[f64]>, S: AsRef<[f64]>>(outputs: &[O], sources: &[S], mixture: &[f64]) -> Result<()> {
    let (m, n) = (outputs.len(), sources.len());
    if n == 0 || m == 0 {
        return invalid("need at least one output and one source");
    }
    if n > m {
        return invalid(format!("{n} sources exceed {m} outputs"));
    }
    let len = mixture.len();
    if outputs.iter().any(|o| o.as_ref().len() != len) || sources.iter().any(|s| s.as_ref().len() != len) {
        return invalid("outputs, sources and mixture must have equal lengths");
    }
    Ok(())
}

/// Advances `p` to the next lexicographic permutation; false after the last one.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum of the variable-source PIT loss over all output assignments.
pub fn pit_loss<O: AsRef<[f64]>, S: AsRef<[f64]>>(
    outputs: &[O],
    sources: &[S],
    mixture: &[f64],
    eps: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    check_shapes(outputs, sources, mixture)?;
    let (m, n) = (outputs.len(), sources.len());
    // cost[slot][output], slots ≥ n are silent references
    let mix_floor = tau * energy(mixture) + eps;
    let mut cost = vec![vec![0.0; m]; m];
    for (slot, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            let out = outputs[j].as_ref();
            *c = if slot < n {
                let s = sources[slot].as_ref();
                db((squared_distance(s, out) + eps) / (energy(s) + eps)) / n as f64
            } else {
                db(energy(out) + mix_floor) / (m - n) as f64
            };
        }
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    loop {
        let l1: f64 = (0..n).map(|slot| cost[slot][perm[slot]]).sum();
        let l2: f64 = (n..m).map(|slot| cost[slot][perm[slot]]).sum();
        let total = l1 + l2;
        if best.as_ref().is_none_or(|(t, _, _)| total < *t) {
            best = Some((total, l1, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total, l1, perm) = best.expect("at least one permutation");
    Ok(LossBreakdown {
        total,
        l1,
        l2: (m > n).then_some(total - l1),
        assignment: Assignment { perm },
        n_sources: n,
        n_outputs: m,
    })
}

/// Reference sources and mixture of one training example.
#[derive(Clone, Debug)]
pub struct Targets {
    pub sources: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
}

/// Records the batch-mean PIT loss on the graph for `outputs: (B, M, L)`.
///
/// The assignment of every item is chosen on the current values and then
/// held fixed, so gradients flow through the selected permutation only.
pub fn pit_loss_graph(
    graph: &mut Graph,
    outputs: Var,
    targets: &[Targets],
    eps: f64,
    tau: f64,
) -> Result<(Var, Vec<LossBreakdown>)> {
    let [batch, m, len] = graph.shape(outputs).0;
    if batch != targets.len() || batch == 0 {
        return invalid(format!("{} targets for a batch of {batch}", targets.len()));
    }
    let to_db = 10.0 / LN_10;
    let mut breakdowns = Vec::with_capacity(batch);
    let mut item_losses = Vec::with_capacity(batch);
    for (b, target) in targets.iter().enumerate() {
        let values: Vec<Vec<f64>> = (0..m).map(|j| graph.value(outputs).row(b, j).to_vec()).collect();
        let breakdown = pit_loss(&values, &target.sources, &target.mixture, eps, tau)?;
        let n = target.sources.len();
        let item = graph.narrow(outputs, Axis::Batch, b, 1)?;
        let mut l1_sum: Option<Var> = None;
        let mut l1_offset = 0.0;
        for (slot, src) in target.sources.iter().enumerate() {
            let out = graph.narrow(item, Axis::Channel, breakdown.assignment.output_for(slot), 1)?;
            let s = graph.constant(Tensor::from_vec(Shape::new(1, 1, len), src.clone())?);
            let diff = graph.sub(out, s)?;
            let sq = graph.mul(diff, diff)?;
            let d = graph.sum(sq);
            let d = graph.add_scalar(d, eps);
            let term = graph.ln(d)?;
            l1_sum = Some(match l1_sum {
                Some(acc) => graph.add(acc, term)?,
                None => term,
            });
            l1_offset += (energy(src) + eps).ln();
        }
        let l1_sum = l1_sum.expect("at least one source");
        let l1 = graph.add_scalar(l1_sum, -l1_offset);
        let mut loss = graph.scale(l1, to_db / n as f64);
        if m > n {
            let mix_floor = tau * energy(&target.mixture) + eps;
            let mut l2_sum: Option<Var> = None;
            for slot in n..m {
                let out = graph.narrow(item, Axis::Channel, breakdown.assignment.output_for(slot), 1)?;
                let sq = graph.mul(out, out)?;
                let d = graph.sum(sq);
                let d = graph.add_scalar(d, mix_floor);
                let term = graph.ln(d)?;
                l2_sum = Some(match l2_sum {
                    Some(acc) => graph.add(acc, term)?,
                    None => term,
                });
            }
            let l2 = graph.scale(l2_sum.expect("m > n"), to_db / (m - n) as f64);
            loss = graph.add(loss, l2)?;
        }
        item_losses.push(loss);
        breakdowns.push(breakdown);
    }
    let mut total = item_losses[0];
    for &l in &item_losses[1..] {
        total = graph.add(total, l)?;
    }
    let mean = graph.scale(total, 1.0 / batch as f64);
    Ok((mean, breakdowns))
}

/// Scale-invariant SDR in dB, with `α = ⟨ŝ, s⟩/‖s‖²` and no mean removal.
pub fn si_sdr(estimate: &[f64], reference: &[f64], eps: f64) -> Result<f64> {
    if estimate.len() != reference.len() {
        return invalid("estimate and reference lengths differ");
    }
    let ref_energy = energy(reference);
    if ref_energy == 0.0 {
        return invalid("SI-SDR reference is all zeros");
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    Ok(db((target_energy + eps) / (residual + eps)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum MetricKind {
    #[serde(rename = "si_sdr")]
    SiSdr,
    #[serde(rename = "delta_si_sdr")]
    DeltaSiSdr,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::SiSdr => "si_sdr",
            MetricKind::DeltaSiSdr => "delta_si_sdr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceScore {
    pub source: usize,
    pub output: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub metric: MetricKind,
    pub per_source: Vec<SourceScore>,
}

impl SceneScore {
    pub fn mean(&self) -> Option<f64> {
        (!self.per_source.is_empty())
            .then(|| self.per_source.iter().map(|s| s.value).sum::<f64>() / self.per_source.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub eps: f64,
    /// References with energy below `floor · ‖x‖²` count as silent and are
    /// left out of the score.
    pub activity_floor: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            activity_floor: None,
        }
    }
}

/// SI-SDR (one source) or SI-SDR improvement (several sources) under the
/// output assignment that maximizes the mean SI-SDR over the references.
///
/// Only active references are scored, and their count decides the metric: a
/// scene left with a single audible source is scored like a one-source scene.
pub fn eval_scene<O: AsRef<[f64]>, S: AsRef<[f64]>>(
    outputs: &[O],
    sources: &[S],
    mixture: &[f64],
    opts: EvalOptions,
) -> Result<SceneScore> {
    check_shapes(outputs, sources, mixture)?;
    let mix_energy = energy(mixture);
    let active: Vec<usize> = (0..sources.len())
        .filter(|&n| {
            let e = energy(sources[n].as_ref());
            e > 0.0 && opts.activity_floor.is_none_or(|f| e >= f * mix_energy)
        })
        .collect();
    let metric = if active.len() <= 1 {
        MetricKind::SiSdr
    } else {
        MetricKind::DeltaSiSdr
    };
    if active.is_empty() {
        return Ok(SceneScore {
            metric,
            per_source: Vec::new(),
        });
    }
    let m = outputs.len();
    let mut table = vec![vec![0.0; m]; active.len()];
    for (row, &n) in table.iter_mut().zip(&active) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = si_sdr(outputs[j].as_ref(), sources[n].as_ref(), opts.eps)?;
        }
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let score: f64 = (0..active.len()).map(|a| table[a][perm[a]]).sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, perm[..active.len()].to_vec()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (_, chosen) = best.expect("at least one permutation");
    let mut per_source = Vec::with_capacity(active.len());
    for (a, &n) in active.iter().enumerate() {
        let mut value = table[a][chosen[a]];
        if metric == MetricKind::DeltaSiSdr {
            value -= si_sdr(mixture, sources[n].as_ref(), opts.eps)?;
        }
        per_source.push(SourceScore {
            source: n,
            output: chosen[a],
            value,
        });
    }
    Ok(SceneScore { metric, per_source })
}
