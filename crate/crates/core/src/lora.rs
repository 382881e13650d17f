//! Low-rank adapters on the feed-forward matrices: `W + αBA` with `B = 0` at
//! attach time.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId};
use crate::scorer::{
    model_to_bytes, read_container, sha256_hex, write_container, Reader, ScorerError, ScorerModel, Writer,
    KIND_ADAPTER,
};

pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub bottleneck: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            bottleneck: 1,
            alpha: 4.0,
            dropout: 0.3,
        }
    }
}

/// One adapter pair on a host weight of shape `out x in`: `a` is
/// `bottleneck x in`, `b` is `out x bottleneck`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub host: ParamId,
    pub host_name: String,
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: f64,
    pub bottleneck: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
    config: LoraConfig,
    first_param: usize,
    base_hash: String,
}

impl AdapterSet {
    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn config(&self) -> LoraConfig {
        self.config
    }

    /// sha256 of the base checkpoint these adapters extend.
    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    pub(crate) fn first_param_index(&self) -> usize {
        self.first_param
    }

    pub(crate) fn for_host(&self, host: ParamId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.host == host)
    }
}

/// Extra trainable parameters for bottleneck `b`, model dim `d`, feed-forward
/// dim `m` and `l` layers per stack.
pub fn param_count(b: u64, d: u64, m: u64, l: u64) -> u64 {
    b * (m + d) * 2 * l * 2
}

impl ScorerModel {
    /// Attaches one adapter to each feed-forward matrix of every encoder and
    /// decoder layer and freezes all base weights.
    pub fn attach_adapters(&mut self, config: LoraConfig, seed: u64) -> Result<&AdapterSet, ScorerError> {
        if self.adapters.is_some() {
            return Err(ScorerError::Adapter("adapters already attached".into()));
        }
        let c = *self.config();
        if config.bottleneck == 0 || config.bottleneck >= c.d_model.min(c.d_ff) {
            return Err(ScorerError::Adapter(format!(
                "bottleneck {} must be in [1, {})",
                config.bottleneck,
                c.d_model.min(c.d_ff)
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) || !config.alpha.is_finite() {
            return Err(ScorerError::Adapter(format!("invalid adapter config {config:?}")));
        }
        let base_hash = sha256_hex(&model_to_bytes(self)?);
        let dist = Normal::new(0.0, A_INIT_STD).map_err(|e| ScorerError::Adapter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first_param = self.params.len();
        self.params.set_all_trainable(false);
        let hosts: Vec<ParamId> = self.ffn_blocks().iter().flat_map(|f| [f.up.w, f.down.w]).collect();
        let mut adapters = Vec::with_capacity(hosts.len());
        for host in hosts {
            let name = self.params.get(host).name.clone();
            let (out, inp) = self.params.value(host).shape();
            let a_data = (0..config.bottleneck * inp).map(|_| dist.sample(&mut rng)).collect();
            let a = self
                .params
                .add(&format!("{name}.lora_a"), Matrix::from_vec(config.bottleneck, inp, a_data)?, true)?;
            let b = self
                .params
                .add(&format!("{name}.lora_b"), Matrix::zeros(out, config.bottleneck), true)?;
            adapters.push(LoraAdapter {
                host,
                host_name: name,
                a,
                b,
                alpha: config.alpha,
                bottleneck: config.bottleneck,
                dropout: config.dropout,
            });
        }
        Ok(self.adapters.insert(AdapterSet {
            adapters,
            config,
            first_param,
            base_hash,
        }))
    }

    /// `W + αBA` for one attached adapter.
    pub fn effective_weight(&self, adapter: &LoraAdapter) -> Result<Matrix, ScorerError> {
        let ba = self.params.value(adapter.b).matmul(self.params.value(adapter.a))?;
        let mut w = self.params.value(adapter.host).clone();
        w.add_scaled(&ba, adapter.alpha);
        Ok(w)
    }

    /// Folds every adapter into its host weight, removes the adapters and
    /// makes all parameters trainable again.
    pub fn merge_adapters(&mut self) -> Result<(), ScorerError> {
        let set = self
            .adapters
            .as_ref()
            .ok_or_else(|| ScorerError::Adapter("no adapters attached".into()))?;
        let merged: Vec<(ParamId, Matrix)> = set
            .adapters
            .iter()
            .map(|a| Ok((a.host, self.effective_weight(a)?)))
            .collect::<Result<_, ScorerError>>()?;
        let first = set.first_param;
        for (host, w) in merged {
            self.params.get_mut(host).value = w;
        }
        self.params.truncate(first);
        self.params.set_all_trainable(true);
        self.adapters = None;
        Ok(())
    }

    /// Removes attached adapters without touching the base weights.
    pub fn detach_adapters(&mut self) -> Result<(), ScorerError> {
        let set = self
            .adapters
            .take()
            .ok_or_else(|| ScorerError::Adapter("no adapters attached".into()))?;
        self.params.truncate(set.first_param);
        self.params.set_all_trainable(true);
        Ok(())
    }

    pub fn adapters_to_bytes(&self) -> Result<Vec<u8>, ScorerError> {
        let set = self
            .adapters
            .as_ref()
            .ok_or_else(|| ScorerError::Adapter("no adapters attached".into()))?;
        let mut w = Writer::default();
        w.bytes(set.base_hash.as_bytes())?;
        w.usize(set.config.bottleneck)?;
        w.f64(set.config.alpha);
        w.f64(set.config.dropout);
        let arrays: Vec<(String, Matrix)> = set
            .adapters
            .iter()
            .flat_map(|a| [a.a, a.b])
            .map(|id| {
                let p = self.params.get(id);
                (p.name.clone(), p.value.clone())
            })
            .collect();
        write_container(KIND_ADAPTER, &w.into_inner(), &arrays)
    }

    /// Attaches adapters read from an adapter checkpoint. The checkpoint must
    /// have been produced against this exact base model.
    pub fn load_adapters_from_bytes(&mut self, bytes: &[u8]) -> Result<(), ScorerError> {
        let container = read_container(bytes, KIND_ADAPTER)?;
        let mut r = Reader::new(container.config);
        let hash = r.string()?;
        let config = LoraConfig {
            bottleneck: r.usize()?,
            alpha: r.f64()?,
            dropout: r.f64()?,
        };
        if !r.is_done() {
            return Err(ScorerError::Checkpoint("trailing config bytes".into()));
        }
        if self.adapters.is_some() {
            return Err(ScorerError::Adapter("adapters already attached".into()));
        }
        let own = sha256_hex(&model_to_bytes(self)?);
        if own != hash {
            return Err(ScorerError::Checkpoint(format!(
                "adapter base hash {hash} does not match model {own}"
            )));
        }
        self.attach_adapters(config, 0)?;
        let expected = self.params.len() - self.base_param_len();
        if container.arrays.len() != expected {
            self.detach_adapters()?;
            return Err(ScorerError::Checkpoint(format!(
                "{} adapter arrays, expected {expected}",
                container.arrays.len()
            )));
        }
        for (name, value) in container.arrays {
            let Some(id) = self.params.id(&name).filter(|id| id.index() >= self.base_param_len()) else {
                self.detach_adapters()?;
                return Err(ScorerError::Checkpoint(format!("unknown adapter array {name}")));
            };
            if self.params.value(id).shape() != value.shape() {
                self.detach_adapters()?;
                return Err(ScorerError::Checkpoint(format!("{name}: shape mismatch")));
            }
            self.params.get_mut(id).value = value;
        }
        Ok(())
    }

    pub fn save_adapters(&self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        std::fs::write(path, self.adapters_to_bytes()?)?;
        Ok(())
    }

    pub fn load_adapters(&mut self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        self.load_adapters_from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, AdamConfig, AdamState, DropoutKey, Graph};
    use crate::scorer::{ModelConfig, Tokenizer};

    fn tiny() -> ScorerModel {
        let tok = Tokenizer::new("abcdefgh ?");
        let config = ModelConfig {
            vocab_size: tok.vocab_size(),
            max_len: 32,
            layers: 2,
            d_model: 8,
            d_ff: 12,
            heads: 2,
        };
        ScorerModel::new(config, tok, 11).unwrap()
    }

    const PROBES: [(&str, [&str; 2]); 3] = [("abc?", ["de", "f"]), ("hhg a", ["a", "bb"]), ("c", ["gah", "h"])];

    fn scores(model: &ScorerModel) -> Vec<Vec<f64>> {
        PROBES.iter().map(|(i, t)| model.raw_scores(i, t).unwrap()).collect()
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(param_count(1, 1024, 16384, 24), 1_671_168);
        assert_eq!(param_count(1, 1024, 65536, 24), 6_389_760);
        assert_eq!(param_count(1, 32, 64, 2), 768);
    }

    #[test]
    fn attach_is_identity_and_counts_match() {
        let mut model = tiny();
        let before = scores(&model);
        model.attach_adapters(LoraConfig::default(), 3).unwrap();
        assert_eq!(scores(&model), before);
        assert_eq!(model.params().trainable_count() as u64, param_count(1, 8, 12, 2));
        assert_eq!(model.adapters().unwrap().adapters().len(), 8);
    }

    #[test]
    fn arbitrary_a_with_zero_b_is_identity() {
        let mut model = tiny();
        let before = scores(&model);
        model.attach_adapters(LoraConfig::default(), 3).unwrap();
        let ids: Vec<_> = model.adapters().unwrap().adapters().iter().map(|a| a.a).collect();
        for id in ids {
            model.params_mut().get_mut(id).value.fill(7.5);
        }
        assert_eq!(scores(&model), before);
    }

    #[test]
    fn attach_errors() {
        let mut model = tiny();
        let bad = LoraConfig {
            bottleneck: 8,
            ..LoraConfig::default()
        };
        assert!(model.attach_adapters(bad, 0).is_err());
        model.attach_adapters(LoraConfig::default(), 0).unwrap();
        assert!(model.attach_adapters(LoraConfig::default(), 0).is_err());
        model.merge_adapters().unwrap();
        assert!(model.merge_adapters().is_err());
    }

    #[test]
    fn rank_one_hand_example() {
        let mut model = tiny();
        model
            .attach_adapters(
                LoraConfig {
                    bottleneck: 1,
                    alpha: 2.0,
                    dropout: 0.0,
                },
                0,
            )
            .unwrap();
        let adapter = model.adapters().unwrap().adapters()[0].clone();
        let (out, inp) = model.params().value(adapter.host).shape();
        let mut b = Matrix::zeros(out, 1);
        b.set(0, 0, 1.0);
        model.params_mut().get_mut(adapter.b).value = b;
        model.params_mut().get_mut(adapter.a).value = Matrix::filled(1, inp, 1.0);
        let w = model.params().value(adapter.host).clone();
        let eff = model.effective_weight(&adapter).unwrap();
        for r in 0..out {
            for c in 0..inp {
                let expected = if r == 0 { w.get(r, c) + 2.0 } else { w.get(r, c) };
                assert_eq!(eff.get(r, c), expected);
            }
        }
    }

    fn randomize_b(model: &mut ScorerModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.5).unwrap();
        let ids: Vec<_> = model.adapters().unwrap().adapters().iter().map(|a| a.b).collect();
        for id in ids {
            for v in model.params_mut().get_mut(id).value.data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }

    #[test]
    fn effective_weight_matches_dense_oracle() {
        let mut model = tiny();
        model.attach_adapters(LoraConfig::default(), 5).unwrap();
        randomize_b(&mut model, 9);
        for adapter in model.adapters().unwrap().adapters() {
            let w = model.params().value(adapter.host);
            let a = model.params().value(adapter.a);
            let b = model.params().value(adapter.b);
            let eff = model.effective_weight(adapter).unwrap();
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    let ba: f64 = (0..adapter.bottleneck).map(|k| b.get(r, k) * a.get(k, c)).sum();
                    assert!((eff.get(r, c) - (w.get(r, c) + adapter.alpha * ba)).abs() < 1e-12);
                }
            }
            let delta: Vec<Vec<f64>> = (0..w.rows())
                .map(|r| (0..w.cols()).map(|c| eff.get(r, c) - w.get(r, c)).collect())
                .collect();
            let pivot = delta.iter().position(|row| row[0].abs() > 1e-9).unwrap();
            for row in &delta {
                let ratio = row[0] / delta[pivot][0];
                for c in 0..w.cols() {
                    assert!((row[c] - ratio * delta[pivot][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut model = tiny();
        model.attach_adapters(LoraConfig::default(), 5).unwrap();
        randomize_b(&mut model, 2);
        let adapted = scores(&model);
        let mut merged = model.clone();
        merged.merge_adapters().unwrap();
        assert!(merged.adapters().is_none());
        for (x, y) in adapted.iter().flatten().zip(scores(&merged).iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_adapter_merge_is_noop() {
        let mut model = tiny();
        let before = scores(&model);
        model.attach_adapters(LoraConfig::default(), 5).unwrap();
        model.merge_adapters().unwrap();
        assert_eq!(scores(&model), before);
    }

    #[test]
    fn training_step_moves_outputs_but_not_base() {
        let mut model = tiny();
        let base: Vec<Matrix> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
        let before = scores(&model);
        model.attach_adapters(LoraConfig::default(), 5).unwrap();
        let mut state = AdamState::new();
        for step in 0..2 {
            let grads = {
                let mut g = Graph::training(model.params(), DropoutKey { seed: 1, step });
                let s = model.score_targets(&mut g, "abc?", &["de", "f"]).unwrap();
                let loss = g.soft_cross_entropy(&[1.0, 0.0], s).unwrap();
                g.backward(loss).unwrap()
            };
            model.params_mut().zero_grad();
            model.params_mut().accumulate(&grads);
            adam_step(model.params_mut(), &mut state, 0.01, AdamConfig::default()).unwrap();
        }
        assert_ne!(scores(&model), before);
        for (i, w) in base.iter().enumerate() {
            assert_eq!(&model.params().iter().nth(i).unwrap().1.value, w);
        }
    }

    #[test]
    fn adapter_checkpoint_round_trip_and_hash_check() {
        let mut model = tiny();
        let base = model.clone();
        model.attach_adapters(LoraConfig::default(), 5).unwrap();
        randomize_b(&mut model, 4);
        let bytes = model.adapters_to_bytes().unwrap();
        let mut restored = base.clone();
        restored.load_adapters_from_bytes(&bytes).unwrap();
        assert_eq!(scores(&restored), scores(&model));
        assert_eq!(restored.adapters_to_bytes().unwrap(), bytes);

        let mut other = ScorerModel::new(*base.config(), base.tokenizer().clone(), 99).unwrap();
        assert!(other.load_adapters_from_bytes(&bytes).is_err());
        assert!(other.adapters().is_none());
    }
}
