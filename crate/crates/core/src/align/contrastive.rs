use serde::{Deserialize, Serialize};

use crate::align::head::{Mlp, MlpTrace};
use crate::error::{Error, Result};
use crate::numerics::ops::normalize_backward;
use crate::numerics::{dot, log_sum_exp, norm, softmax};
use crate::prototypes::PrototypeSet;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// `p̂ · r̂ / τ` on L2-normalized vectors.
    Cosine,
    /// `p · r`, no normalization or temperature.
    RawDot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub mode: SimilarityMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            mode: SimilarityMode::Cosine,
        }
    }
}

/// Batch prototypes indexed `[class][component]`; `None` marks an absent slot.
pub type BatchPrototypes = Vec<Vec<Option<Vec<f64>>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Same layout as the input prototypes; `None` where the input was absent.
    pub grad_prototypes: BatchPrototypes,
    pub grad_head: Mlp,
    /// Number of batch prototypes contributing a term.
    pub terms: usize,
    /// Number of reference prototypes in every denominator.
    pub references: usize,
}

struct Projected {
    unit: Vec<f64>,
    norm: f64,
}

fn project(v: Vec<f64>, mode: SimilarityMode) -> Projected {
    let n = norm(&v).max(NORM_FLOOR);
    let unit = match mode {
        SimilarityMode::Cosine => v.iter().map(|x| x / n).collect(),
        SimilarityMode::RawDot => v,
    };
    Projected { unit, norm: n }
}

fn unproject(p: &Projected, g: &[f64], mode: SimilarityMode) -> Vec<f64> {
    match mode {
        SimilarityMode::Cosine => normalize_backward(&p.unit, p.norm, g),
        SimilarityMode::RawDot => g.to_vec(),
    }
}

/// Prototype contrastive loss against the foreground reference prototypes.
///
/// Every reference centroid `P^j_n` is mapped through `head` into the batch
/// prototype space. For each present batch prototype `p_{i,k}` whose reference
/// `(i,k)` exists, the term is `-log softmax_{(j,n)}(s(p_{i,k}, r_{j,n}))[(i,k)]`
/// with the softmax over every present foreground reference. The loss is the
/// mean over such terms (0 when there are none).
pub fn contrastive_loss(
    protos: &BatchPrototypes,
    refs: &PrototypeSet,
    head: &Mlp,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput> {
    head.check()?;
    if head.input_dim() != refs.channels {
        return Err(Error::Domain(format!(
            "head expects {} inputs, prototypes have {} channels",
            head.input_dim(),
            refs.channels
        )));
    }
    if protos.len() > refs.num_classes {
        return Err(Error::Domain(
            "more batch classes than reference classes".into(),
        ));
    }
    if cfg.mode == SimilarityMode::Cosine && !(cfg.temperature > 0.0) {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    let dim = head.output_dim();
    let inv_t = match cfg.mode {
        SimilarityMode::Cosine => 1.0 / cfg.temperature,
        SimilarityMode::RawDot => 1.0,
    };

    let mut ref_keys = Vec::new();
    let mut ref_proj = Vec::new();
    let mut ref_traces: Vec<MlpTrace> = Vec::new();
    for (c, k, centroid) in refs.iter_centroids() {
        if c >= refs.num_classes {
            continue;
        }
        let (out, trace) = head.forward_traced(centroid);
        ref_keys.push((c, k));
        ref_proj.push(project(out, cfg.mode));
        ref_traces.push(trace);
    }

    let mut grad_prototypes: BatchPrototypes =
        protos.iter().map(|row| vec![None; row.len()]).collect();
    let mut grad_head = head.zeros_like();
    let mut terms = Vec::new();
    for (i, row) in protos.iter().enumerate() {
        for (k, p) in row.iter().enumerate() {
            let Some(p) = p else { continue };
            if p.len() != dim {
                return Err(Error::Domain(format!(
                    "batch prototype has {} dims, head emits {dim}",
                    p.len()
                )));
            }
            if let Some(pos) = ref_keys.iter().position(|key| *key == (i, k)) {
                terms.push((i, k, pos, project(p.clone(), cfg.mode)));
            }
        }
    }
    let m = terms.len();
    if m == 0 {
        return Ok(ContrastiveOutput {
            loss: 0.0,
            grad_prototypes,
            grad_head,
            terms: 0,
            references: ref_keys.len(),
        });
    }

    let scale = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut g_ref_unit = vec![vec![0.0; dim]; ref_keys.len()];
    for (i, k, pos, p) in &terms {
        let sims: Vec<f64> = ref_proj
            .iter()
            .map(|r| dot(&p.unit, &r.unit) * inv_t)
            .collect();
        loss += log_sum_exp(&sims) - sims[*pos];
        let mut g_sim = softmax(&sims);
        g_sim[*pos] -= 1.0;
        let mut g_unit = vec![0.0; dim];
        for ((gs, r), gr) in g_sim.iter().zip(&ref_proj).zip(g_ref_unit.iter_mut()) {
            let w = gs * inv_t * scale;
            for d in 0..dim {
                g_unit[d] += w * r.unit[d];
                gr[d] += w * p.unit[d];
            }
        }
        grad_prototypes[*i][*k] = Some(unproject(p, &g_unit, cfg.mode));
    }
    for ((r, trace), g) in ref_proj.iter().zip(&ref_traces).zip(&g_ref_unit) {
        let g_out = unproject(r, g, cfg.mode);
        head.backward(trace, &g_out, &mut grad_head);
    }
    Ok(ContrastiveOutput {
        loss: loss * scale,
        grad_prototypes,
        grad_head,
        terms: m,
        references: ref_keys.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::prototypes::{ClassPrototypes, PrototypeMeta, PROTOTYPE_SCHEMA_VERSION};

    fn refs(c: usize, k: usize, d: usize, fill: impl Fn(usize, usize) -> Vec<f64>) -> PrototypeSet {
        let classes = (0..=c)
            .map(|ci| ClassPrototypes {
                class_id: ci,
                present: true,
                centroids: (0..k).map(|ki| fill(ci, ki)).collect(),
                counts: vec![1; k],
            })
            .collect();
        PrototypeSet {
            schema_version: PROTOTYPE_SCHEMA_VERSION,
            channels: d,
            components: k,
            num_classes: c,
            classes,
            meta: PrototypeMeta::default(),
        }
    }

    #[test]
    fn uniform_similarity_gives_log_count() {
        let r = refs(3, 4, 4, |_, _| vec![1.0, 0.5, -0.2, 0.3]);
        let head = Mlp::init(4, 4, 4, &mut Rng::new(2, 7));
        let p: BatchPrototypes = vec![vec![Some(vec![0.3, 0.1, 0.9, -0.4]); 4]; 3];
        let out = contrastive_loss(&p, &r, &head, &ContrastiveConfig::default()).unwrap();
        assert!((out.loss - 12f64.ln()).abs() < 1e-9);
        assert_eq!(out.terms, 12);
        assert_eq!(out.references, 12);
    }

    #[test]
    fn singleton_is_zero() {
        let r = refs(1, 1, 3, |_, _| vec![1.0, 2.0, 3.0]);
        let head = Mlp::init(3, 3, 2, &mut Rng::new(1, 7));
        let p: BatchPrototypes = vec![vec![Some(vec![0.4, -1.0])]];
        let out = contrastive_loss(&p, &r, &head, &ContrastiveConfig::default()).unwrap();
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn no_present_prototypes_is_zero() {
        let r = refs(2, 2, 3, |c, k| vec![c as f64, k as f64, 1.0]);
        let head = Mlp::init(3, 3, 3, &mut Rng::new(1, 7));
        let p: BatchPrototypes = vec![vec![None, None], vec![None, None]];
        let out = contrastive_loss(&p, &r, &head, &ContrastiveConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out
            .grad_head
            .layers
            .iter()
            .all(|l| l.weight.iter().all(|w| *w == 0.0)));
    }
}
