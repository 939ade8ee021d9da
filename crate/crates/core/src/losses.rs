//! Per-stream cross-entropy and the weighted four-term objective.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

fn flatten(labels: &[LabelMap]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.data().iter().copied()).collect()
}

/// `weight` times the mean cross-entropy over non-ignored pixels of a batch.
pub fn ce_loss<T: Real>(graph: &mut Graph<T>, logits: Var, labels: &[LabelMap], weight: T) -> Result<Var> {
    graph.cross_entropy(logits, &flatten(labels), &[weight])
}

/// Cross-entropy with one weight per sample, normalized by the batch's
/// valid pixel count.
pub fn ce_loss_weighted<T: Real>(graph: &mut Graph<T>, logits: Var, labels: &[LabelMap], weights: &[T]) -> Result<Var> {
    graph.cross_entropy(logits, &flatten(labels), weights)
}

/// Scalar losses of one step, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_t: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub total: f64,
    pub lambda: f64,
    pub mu: f64,
}

/// Loss nodes of the enabled streams; `None` streams build no graph records.
#[derive(Clone, Copy, Debug, Default)]
pub struct StreamLosses {
    pub source: Option<Var>,
    pub labeled_target: Option<Var>,
    pub inter: Option<Var>,
    pub intra: Option<Var>,
}

/// `l_s + l_t + lambda * l_inter + mu * l_intra` over the enabled streams.
pub fn total_loss<T: Real>(graph: &mut Graph<T>, streams: StreamLosses, lambda: f64, mu: f64) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0 && mu >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got lambda={lambda} mu={mu}")));
    }
    let value = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let breakdown_parts = (
        value(graph, streams.source),
        value(graph, streams.labeled_target),
        value(graph, streams.inter),
        value(graph, streams.intra),
    );
    let terms = [
        streams.source,
        streams.labeled_target,
        streams.inter.map(|v| graph.scale(v, T::of(lambda))),
        streams.intra.map(|v| graph.scale(v, T::of(mu))),
    ];
    let mut total: Option<Var> = None;
    for term in terms.into_iter().flatten() {
        total = Some(match total {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("every loss stream is disabled".into()))?;
    let (l_s, l_t, l_inter, l_intra) = breakdown_parts;
    let breakdown = LossBreakdown { l_s, l_t, l_inter, l_intra, total: graph.value(total).data()[0].as_f64(), lambda, mu };
    Ok((total, breakdown))
}
