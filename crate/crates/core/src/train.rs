//! Adam, the two-phase training loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::EncodedDialog;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, Phase};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocabulary;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        Self {
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(eps),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with `grads[i]` for the i-th parameter of `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step as i32);
        let c2 = one - self.beta2.powi(self.step as i32);
        let lr = T::of(lr);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for ((p, (m, v)), &g) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g)
            {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0-based.
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    /// Mean total loss per turn.
    pub loss: f64,
    pub primary_loss: f64,
    pub synergy_loss: Option<f64>,
}

pub fn phase_at(cfg: &RunConfig, epoch: usize) -> Phase {
    if epoch < cfg.primary_epochs {
        Phase::Primary
    } else {
        Phase::Joint
    }
}

#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes parameters from `config.seed`; the same stream then
    /// drives shuffling and stage-two sampling.
    pub fn new(config: RunConfig, vocab: Vocabulary, feature_dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config, vocab, feature_dim, &mut rng)?;
        let c = &model.config;
        let adam = Adam::new(&model.params, c.beta1, c.beta2, c.adam_eps);
        Ok(Self {
            model,
            adam,
            rng,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn run_epoch(&mut self, data: &[EncodedDialog]) -> Result<EpochLog> {
        let epoch = self.epoch;
        let cfg = self.model.config.clone();
        let phase = phase_at(&cfg, epoch);
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(d, dialog)| (0..dialog.turns.len()).map(move |t| (d, t)))
            .collect();
        if order.is_empty() {
            return Err(Error::Data("no training turns".into()));
        }
        order.shuffle(&mut self.rng);

        let sizes: Vec<usize> = self.model.params.ids().map(|id| self.model.params.get(id).numel()).collect();
        let mut buffer: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut pending = 0;
        let (mut total, mut primary, mut synergy) = (0.0, 0.0, 0.0);
        for (k, &(d, t)) in order.iter().enumerate() {
            let dialog = &data[d];
            let grads = {
                let mut g = Graph::with_params(&self.model.params);
                let loss = self.model.turn_loss(&mut g, dialog, &dialog.turns[t], phase, &mut self.rng)?;
                let value = g.scalar(loss.total).as_f64();
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                total += value;
                primary += loss.primary.as_f64();
                synergy += loss.synergy.map_or(0.0, |s| s.as_f64());
                g.backward(loss.total)?
            };
            for (id, grad) in grads.params() {
                for (b, &x) in buffer[id.0].iter_mut().zip(grad) {
                    *b = *b + x;
                }
            }
            pending += 1;
            if pending == cfg.accumulate || k + 1 == order.len() {
                self.adam.update(&mut self.model.params, &buffer, lr);
                for b in &mut buffer {
                    b.fill(T::zero());
                }
                pending = 0;
            }
        }
        if !self.model.params.ids().all(|id| self.model.params.get(id).is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let n = order.len() as f64;
        let entry = EpochLog {
            epoch,
            phase: match phase {
                Phase::Primary => "primary".into(),
                Phase::Joint => "joint".into(),
            },
            lr,
            loss: total / n,
            primary_loss: primary / n,
            synergy_loss: (phase == Phase::Joint).then(|| synergy / n),
        };
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `total_epochs` have completed, calling `on_epoch` after each.
    pub fn train(
        &mut self,
        data: &[EncodedDialog],
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.model.config.total_epochs() {
            let entry = self.run_epoch(data)?;
            on_epoch(self, &entry)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self.model.params.ids().map(|id| self.model.params.name(id).to_string()).collect();
        let params = self
            .model
            .params
            .ids()
            .map(|id| (names[id.0].clone(), SavedTensor::from_tensor(self.model.params.get(id))))
            .collect();
        let moments = |xs: &[Vec<T>]| -> BTreeMap<String, Vec<f64>> {
            names
                .iter()
                .zip(xs)
                .map(|(n, x)| (n.clone(), x.iter().map(|v| v.as_f64()).collect()))
                .collect()
        };
        Checkpoint {
            config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            feature_dim: self.model.feature_dim,
            epoch: self.epoch,
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos(),
            },
            params,
            adam: AdamState {
                step: self.adam.step,
                m: moments(&self.adam.m),
                v: moments(&self.adam.v),
            },
            log: self.log.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), ckpt.vocab.clone(), ckpt.feature_dim)?;
        t.model.params = ckpt.restore_params(&t.model.params)?;
        let restore = |saved: &BTreeMap<String, Vec<f64>>, into: &mut Vec<Vec<T>>| -> Result<()> {
            for (i, id) in t.model.params.ids().enumerate() {
                let name = t.model.params.name(id);
                let src = saved.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
                if src.len() != into[i].len() {
                    return Err(Error::Data(format!("optimizer state for {name} has the wrong size")));
                }
                into[i] = src.iter().map(|&x| T::of(x)).collect();
            }
            Ok(())
        };
        let mut m = t.adam.m.clone();
        let mut v = t.adam.v.clone();
        restore(&ckpt.adam.m, &mut m)?;
        restore(&ckpt.adam.v, &mut v)?;
        t.adam.m = m;
        t.adam.v = v;
        t.adam.step = ckpt.adam.step;
        t.rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        t.rng.set_word_pos(ckpt.rng.word_pos);
        t.epoch = ckpt.epoch;
        t.log = ckpt.log.clone();
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl SavedTensor {
    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.as_f64()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Everything needed to resume training or evaluate: parameters by name,
/// the run configuration, vocabulary, optimizer and RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: RngState,
    pub params: BTreeMap<String, SavedTensor>,
    pub adam: AdamState,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    /// `template` with every tensor replaced by the saved one of the same name.
    fn restore_params<T: Scalar>(&self, template: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = template.clone();
        for id in template.ids() {
            let name = template.name(id);
            let saved = self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if saved.shape != template.get(id).shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    saved.shape,
                    template.get(id).shape()
                )));
            }
            out.get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(&saved.data)
                .for_each(|(p, &x)| *p = T::of(x));
        }
        if self.params.len() != template.len() {
            return Err(Error::Data("checkpoint has parameters this model does not use".into()));
        }
        Ok(out)
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        Ok(Trainer::<T>::from_checkpoint(self)?.model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(json)?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
