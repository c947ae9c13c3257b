//! Finite-difference check of every parameter group of a whole model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mecformer, ModelConfig, Target, BOS, EOS};
use crate::ecn::TaskIndicator;
use crate::error::Result;
use crate::params::Bound;
use crate::tensor::gradcheck::{analytic_gradients, numeric_gradients, random_tensor, relative_error, DEFAULT_STEP};
use crate::tensor::OpKind;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub scalars: usize,
    pub worst_rel_error: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error <= TOLERANCE
    }
}

/// d_f=6, d_model=8, two heads, one encoder and one decoder layer, two tasks,
/// six tokens.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_f: 6,
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        tasks: 2,
        vocab_size: 6,
        categories: 4,
        num_landmarks: 2,
        pwff_hidden: 32,
        ..ModelConfig::default()
    }
}

/// Parameter name with layer indices and the trailing tensor role removed,
/// e.g. `encoder.0.attn.wq` → `encoder.attn`.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name
        .split('.')
        .filter(|s| s.parse::<usize>().is_err())
        .collect();
    let keep = if parts.len() > 2 { parts.len() - 1 } else { parts.len() };
    parts[..keep].join(".")
}

/// Worst relative error per parameter group for one random bag and target.
pub fn check_model(config: ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupCheck>> {
    let model = Mecformer::new(config, seed)?;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x = random_tensor(&mut rng, &[4, cfg.d_f]);
    let task = TaskIndicator::new(rng.gen_range(0..cfg.tasks), cfg.tasks)?;
    let tokens: Vec<usize> = if cfg.use_decoder {
        let mut t = vec![BOS];
        t.extend((0..2).map(|_| rng.gen_range(2..cfg.vocab_size)));
        t.push(EOS);
        t
    } else {
        Vec::new()
    };
    let category = rng.gen_range(0..cfg.categories.max(1));

    let inputs: Vec<_> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut crate::Tape, vars: &[crate::Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let target = if cfg.use_decoder {
            Target::Tokens(&tokens)
        } else {
            Target::Category(category)
        };
        model.loss(tape, &p, &x, task, target)
    };
    let analytic = analytic_gradients(&inputs, &f, fault)?;
    let numeric = numeric_gradients(&inputs, &f, DEFAULT_STEP)?;

    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    for ((name, t), (a, n)) in model.params().iter().zip(analytic.iter().zip(&numeric)) {
        let group = param_group(name);
        let entry = groups.entry(group.clone()).or_insert(GroupCheck {
            group,
            tensors: 0,
            scalars: 0,
            worst_rel_error: 0.0,
        });
        entry.tensors += 1;
        entry.scalars += t.numel();
        entry.worst_rel_error = entry.worst_rel_error.max(relative_error(a, n));
    }
    Ok(groups.into_values().collect())
}

/// The standard suite: the tiny configuration with the decoder.
pub fn full_model_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupCheck>> {
    check_model(tiny_config(), seed, fault)
}
