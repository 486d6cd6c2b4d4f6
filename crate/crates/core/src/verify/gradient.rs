//! Finite-difference check of the full training objective against the tape.

use crate::error::{Error, Result};
use crate::model::{Batch, EmbedConfig, ForwardOptions, WideNet, WideNetConfig};
use crate::tensor::{relative_error, ParamId, RngStream, Tape};
use crate::train::total_loss_on_tape;

/// Agreement between analytic and numeric gradients for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGradient {
    pub group: &'static str,
    pub params: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub groups: Vec<GroupGradient>,
    /// Perturbations that changed a routing decision (makes the numeric
    /// estimate meaningless for that coordinate).
    pub routing_flips: usize,
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }
}

/// The configuration used for whole-model gradient checks: two blocks,
/// width 8, two heads, four experts with top-2, four tokens.
pub fn gradient_check_config() -> WideNetConfig {
    WideNetConfig {
        depth: 2,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        num_experts: 4,
        top_k: 2,
        groups: 2,
        embed: EmbedConfig::Token {
            vocab: 6,
            embed_dim: 4,
            max_len: 4,
        },
        num_classes: 3,
        dropout: 0.0,
        ..WideNetConfig::default()
    }
}

pub fn param_group(name: &str) -> &'static str {
    if name.contains("router") {
        "router"
    } else if name.contains(".experts.") || name.contains(".ffn.") {
        "experts"
    } else if name.contains("attn") {
        "attention"
    } else if name.ends_with("gamma") || name.ends_with("beta") {
        "norms"
    } else if name.starts_with("embed.") {
        "embeddings"
    } else if name.starts_with("head.") {
        "classifier"
    } else {
        "other"
    }
}

struct Objective {
    batch: Batch,
    labels: Vec<usize>,
    noise_seed: u64,
    smoothing: f64,
}

impl Objective {
    /// Loss value plus the routing decisions it was computed under.
    fn eval(&self, model: &WideNet) -> Result<(f64, Vec<(Vec<usize>, Vec<bool>)>)> {
        let mut tape = Tape::no_grad();
        let mut rng = RngStream::new(self.noise_seed);
        let out = model.forward(&mut tape, &self.batch, ForwardOptions::train(), &mut rng)?;
        let lambda = model.config().balance_weight;
        let l = total_loss_on_tape(&mut tape, out.logits, &self.labels, self.smoothing, &out.plans, lambda)?;
        let decisions = out
            .plans
            .iter()
            .map(|p| (p.outcome.indices.clone(), p.outcome.kept.clone()))
            .collect();
        Ok((tape.value(l.total).item()?, decisions))
    }
}

/// Compares `backward()` with central differences (step `h`) for every
/// parameter of a model built from `cfg`, grouped by [`param_group`].
/// Routing noise is frozen by reseeding the stream for every evaluation.
pub fn model_gradient_check(cfg: &WideNetConfig, seed: u64, batch: usize, h: f64) -> Result<GradientCheck> {
    if cfg.dropout != 0.0 {
        return Err(Error::invalid("gradient checks need dropout 0"));
    }
    let EmbedConfig::Token { vocab, max_len, .. } = cfg.embed else {
        return Err(Error::invalid("gradient checks use a token embedding"));
    };
    let mut model = WideNet::new(cfg.clone(), seed)?;
    // move γ/β off their constant init so their gradients are generic
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    for &id in &ids {
        let name = model.params().name(id).to_string();
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with(".b") {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += 0.1 * rng.next_gaussian();
            }
        }
    }
    let obj = Objective {
        batch: Batch::Tokens {
            ids: (0..batch * max_len).map(|_| rng.next_index(vocab)).collect(),
            batch,
        },
        labels: (0..batch).map(|_| rng.next_index(cfg.num_classes)).collect(),
        noise_seed: seed.wrapping_add(17),
        smoothing: 0.1,
    };

    // analytic
    let mut tape = Tape::new();
    let mut noise = RngStream::new(obj.noise_seed);
    let out = model.forward(&mut tape, &obj.batch, ForwardOptions::train(), &mut noise)?;
    let loss = total_loss_on_tape(
        &mut tape,
        out.logits,
        &obj.labels,
        obj.smoothing,
        &out.plans,
        cfg.balance_weight,
    )?;
    model.params_mut().zero_grad();
    tape.backward_into(loss.total, model.params_mut())?;
    let (_, base) = obj.eval(&model)?;

    let mut analytic: Vec<(&'static str, Vec<f64>)> = Vec::new();
    let mut numeric: Vec<(&'static str, Vec<f64>)> = Vec::new();
    let mut flips = 0;
    for &id in &ids {
        let group = param_group(model.params().name(id));
        let g = model.params().get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let n = model.params().get(id).numel();
        let mut fd = Vec::with_capacity(n);
        for i in 0..n {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let (plus, dp) = obj.eval(&model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let (minus, dm) = obj.eval(&model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            if dp != base || dm != base {
                flips += 1;
            }
            fd.push((plus - minus) / (2.0 * h));
        }
        match analytic.iter().position(|(k, _)| *k == group) {
            Some(p) => {
                analytic[p].1.extend(g);
                numeric[p].1.extend(fd);
            }
            None => {
                analytic.push((group, g));
                numeric.push((group, fd));
            }
        }
    }
    let groups = analytic
        .iter()
        .zip(&numeric)
        .map(|((group, a), (_, n))| GroupGradient {
            group,
            params: a.len(),
            rel_error: relative_error(a, n, 1e-12),
        })
        .collect();
    Ok(GradientCheck {
        groups,
        routing_flips: flips,
    })
}
