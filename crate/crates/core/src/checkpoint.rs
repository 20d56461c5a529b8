//! Model checkpoints: a `key = value` text header terminated by an
//! `end_header` line, followed by raw little-endian `f64` values.
//!
//! Per layer the payload holds `base_w` and then the trainable tensors in
//! canonical order (for routed layers: a factors, b factors, `w_a`,
//! `w_b_ifs`, each `w_ab` slice when the conditional router is on, then the
//! task tables under task routing). Optional Adam moments follow: all first
//! moments, then all second moments, in the same tensor order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::{Adam, AdamConfig};
use crate::kv::{self, KvBlock};
use crate::linalg::Matrix;
use crate::mixlora::{AdaptedLinear, FactorPool, LoraLinear, MixLoraConfig, RouterParams, RoutingMode};
use crate::model::{Activation, AdapterLayer, Model};

pub const FORMAT_NAME: &str = "mixlora-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, optimizer: None }
    }

    pub fn with_optimizer(model: Model, optimizer: Adam) -> Self {
        Self {
            model,
            optimizer: Some(optimizer),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks = Vec::new();
        let mut top = KvBlock::default();
        top.push("format", FORMAT_NAME)
            .push("format_version", FORMAT_VERSION)
            .push("activation", self.model.activation.name())
            .push("num_layers", self.model.layers.len())
            .push("optimizer", self.optimizer.is_some());
        blocks.push(top);

        let mut payload: Vec<&Matrix> = Vec::new();
        for (i, layer) in self.model.layers.iter().enumerate() {
            blocks.push(layer_header(i, layer));
            payload.push(layer.base_w());
            payload.extend(layer.params().into_iter().map(|(_, m)| m));
        }
        if let Some(adam) = &self.optimizer {
            let mut b = KvBlock::new("optimizer");
            b.push("lr", adam.config.lr)
                .push("beta1", adam.config.beta1)
                .push("beta2", adam.config.beta2)
                .push("eps", adam.config.eps)
                .push("step", adam.step)
                .push("moments", adam.m.len());
            blocks.push(b);
            payload.extend(adam.m.iter());
            payload.extend(adam.v.iter());
        }
        let count: usize = payload.iter().map(|m| m.as_slice().len()).sum();
        blocks[0].push("payload_values", count);

        let mut out = kv::render(&blocks).into_bytes();
        out.extend_from_slice(END.as_bytes());
        out.reserve(count * 8);
        for m in payload {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = find(bytes, END.as_bytes())
            .ok_or_else(|| Error::Format("no `end_header` line found".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
        let body = &bytes[split + END.len()..];
        let blocks = kv::parse(header)?;
        let top = &blocks[0];

        if top.raw("format")? != FORMAT_NAME {
            return Err(Error::Format(format!("not a {FORMAT_NAME} file")));
        }
        let version: u32 = top.get("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {version}")));
        }
        let activation = match top.raw("activation")? {
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            other => return Err(Error::Format(format!("unknown activation `{other}`"))),
        };
        let num_layers: usize = top.get("num_layers")?;
        let has_opt: bool = top.get("optimizer")?;
        let count: usize = top.get("payload_values")?;
        if body.len() != count * 8 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header declares {count} values",
                body.len()
            )));
        }
        let mut reader = Payload {
            values: body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        };

        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let name = format!("layer.{i}");
            let block = blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Format(format!("missing [{name}] section")))?;
            layers.push(read_layer(block, &mut reader).map_err(to_format)?);
        }
        let model = Model::new(layers, activation).map_err(to_format)?;

        let optimizer = if has_opt {
            let b = blocks
                .iter()
                .find(|b| b.name == "optimizer")
                .ok_or_else(|| Error::Format("missing [optimizer] section".into()))?;
            let config = AdamConfig {
                lr: b.get("lr")?,
                beta1: b.get("beta1")?,
                beta2: b.get("beta2")?,
                eps: b.get("eps")?,
            };
            let moments: usize = b.get("moments")?;
            let shapes: Vec<(usize, usize)> = model
                .layers
                .iter()
                .flat_map(|l| l.params().into_iter().map(|(_, m)| m.shape()).collect::<Vec<_>>())
                .collect();
            if moments != 0 && moments != shapes.len() {
                return Err(Error::Format(format!(
                    "optimizer holds {moments} moment tensors, model has {}",
                    shapes.len()
                )));
            }
            let mut take = |n: usize| -> Result<Vec<Matrix>> {
                shapes[..n].iter().map(|&(r, c)| reader.matrix(r, c)).collect()
            };
            let m = take(moments)?;
            let v = take(moments)?;
            Some(Adam {
                config,
                step: b.get("step")?,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn to_format(e: Error) -> Error {
    match e {
        Error::Format(_) | Error::Io { .. } => e,
        other => Error::Format(other.to_string()),
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn layer_header(i: usize, layer: &AdapterLayer) -> KvBlock {
    let mut b = KvBlock::new(format!("layer.{i}"));
    match layer {
        AdapterLayer::Lora(l) => {
            b.push("kind", "lora")
                .push("d_in", layer.d_in())
                .push("d_out", layer.d_out())
                .push("rank", l.rank())
                .push("alpha", l.alpha())
                .push("init_std", l.init_std());
        }
        AdapterLayer::Mix(l) => {
            let c = l.config();
            b.push("kind", "mixlora")
                .push("d_in", c.d_in)
                .push("d_out", c.d_out)
                .push("num_factors", c.num_factors)
                .push("rank", c.rank)
                .push("alpha", c.alpha)
                .push("routing", c.routing)
                .push("gating", c.gating)
                .push("cfs", c.cfs)
                .push("init_std", c.init_std)
                .push("seed", c.seed)
                .push("num_tasks", c.num_tasks);
        }
    }
    b
}

struct Payload<I: Iterator<Item = f64>> {
    values: I,
}

impl<I: Iterator<Item = f64>> Payload<I> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data: Vec<f64> = self.values.by_ref().take(rows * cols).collect();
        if data.len() != rows * cols {
            return Err(Error::Format("payload ended early".into()));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn read_layer<I: Iterator<Item = f64>>(b: &KvBlock, p: &mut Payload<I>) -> Result<AdapterLayer> {
    let d_in: usize = b.get("d_in")?;
    let d_out: usize = b.get("d_out")?;
    let rank: usize = b.get("rank")?;
    match b.raw("kind")? {
        "lora" => {
            let base = p.matrix(d_out, d_in)?;
            let a = p.matrix(rank, d_in)?;
            let bm = p.matrix(d_out, rank)?;
            Ok(AdapterLayer::Lora(LoraLinear::from_parts(
                base,
                a,
                bm,
                b.get("alpha")?,
                b.get("init_std")?,
            )?))
        }
        "mixlora" => {
            let e: usize = b.get("num_factors")?;
            let mut config = MixLoraConfig::new(d_in, d_out, e, rank);
            config.alpha = b.get("alpha")?;
            config.routing = b.raw("routing")?.parse()?;
            config.gating = b.raw("gating")?.parse()?;
            config.cfs = b.get("cfs")?;
            config.init_std = b.get("init_std")?;
            config.seed = b.get("seed")?;
            config.num_tasks = b.get("num_tasks")?;
            let base = p.matrix(d_out, d_in)?;
            let pool = FactorPool {
                a: p.matrix(e, d_in)?,
                b: p.matrix(e, d_out)?,
            };
            let w_a = p.matrix(e, d_in)?;
            let w_b_ifs = p.matrix(e, d_out)?;
            let w_ab = if config.cfs {
                Some((0..rank).map(|_| p.matrix(d_in, e)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let (task_a, task_b) = if config.routing == RoutingMode::Task {
                (Some(p.matrix(config.num_tasks, d_in)?), Some(p.matrix(config.num_tasks, d_out)?))
            } else {
                (None, None)
            };
            let routers = RouterParams {
                w_a,
                w_b_ifs,
                w_ab,
                task_a,
                task_b,
            };
            Ok(AdapterLayer::Mix(AdaptedLinear::from_parts(config, base, pool, routers)?))
        }
        other => Err(Error::Format(format!("unknown layer kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::LossSpec;
    use crate::model::Instance;
    use crate::rng::{gaussian_matrix, seeded};

    fn mix(cfg: MixLoraConfig, seed: u64) -> AdapterLayer {
        let w = gaussian_matrix(&mut seeded(seed), cfg.d_out, cfg.d_in, 1.0);
        let mut l = AdaptedLinear::init(cfg, w, &mut seeded(seed + 1)).unwrap();
        l.pool.b = gaussian_matrix(&mut seeded(seed + 2), l.pool.b.rows(), l.pool.b.cols(), 0.3);
        AdapterLayer::Mix(l)
    }

    fn bits(m: &Model) -> Vec<u64> {
        m.layers
            .iter()
            .flat_map(|l| {
                let mut v: Vec<u64> = l.base_w().as_slice().iter().map(|x| x.to_bits()).collect();
                for (_, p) in l.params() {
                    v.extend(p.as_slice().iter().map(|x| x.to_bits()));
                }
                v
            })
            .collect()
    }

    #[test]
    fn every_layer_kind_round_trips_bit_exactly() {
        let cfgs = [
            MixLoraConfig::new(4, 3, 5, 2).with_alpha(0.1),
            MixLoraConfig::new(4, 3, 5, 2).with_cfs(false).with_seed(u64::MAX),
            MixLoraConfig::new(4, 3, 5, 2).with_routing(RoutingMode::Task).with_num_tasks(3),
            MixLoraConfig::new(4, 3, 5, 3).with_routing(RoutingMode::Random),
        ];
        for (i, cfg) in cfgs.into_iter().enumerate() {
            let model = Model::single(mix(cfg, i as u64));
            let back = Checkpoint::from_bytes(&Checkpoint::new(model.clone()).to_bytes()).unwrap();
            assert_eq!(back.model, model);
            assert_eq!(bits(&back.model), bits(&model));
            assert!(back.optimizer.is_none());
        }
    }

    #[test]
    fn stacked_model_with_optimizer_state() {
        let w = gaussian_matrix(&mut seeded(9), 3, 4, 1.0);
        let lora = LoraLinear::init(w, 2, 4.0, 0.5, &mut seeded(10)).unwrap();
        let mut model = Model::new(
            vec![AdapterLayer::Lora(lora), mix(MixLoraConfig::new(3, 2, 4, 2), 11)],
            Activation::Tanh,
        )
        .unwrap();
        let batch = vec![Instance {
            input: gaussian_matrix(&mut seeded(12), 2, 4, 1.0),
            target: gaussian_matrix(&mut seeded(13), 2, 2, 1.0),
        }];
        let mut adam = Adam::new(AdamConfig::new(1e-2));
        for _ in 0..3 {
            let (_, g) = model.batch_loss_and_grads(&batch, None, LossSpec::mse(), None).unwrap();
            model.apply_adam(&mut adam, &g).unwrap();
        }
        let ck = Checkpoint::with_optimizer(model.clone(), adam.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let h = &batch[0].input;
        let a = model.forward(h, None, None).unwrap();
        let b = back.model.forward(h, None, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_optimizer_without_moments() {
        let model = Model::single(mix(MixLoraConfig::new(2, 2, 3, 1), 4));
        let ck = Checkpoint::with_optimizer(model, Adam::new(AdamConfig::new(0.5)));
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn cfs_off_stores_no_conditional_router() {
        let on = Checkpoint::new(Model::single(mix(MixLoraConfig::new(4, 3, 5, 2), 1))).to_bytes();
        let off = Checkpoint::new(Model::single(mix(MixLoraConfig::new(4, 3, 5, 2).with_cfs(false), 1))).to_bytes();
        let payload = |b: &[u8]| b.len() - find(b, END.as_bytes()).unwrap() - END.len();
        assert_eq!(payload(&on) - payload(&off), 2 * 4 * 5 * 8);
    }

    #[test]
    fn malformed_input_is_a_format_error() {
        let good = Checkpoint::new(Model::single(mix(MixLoraConfig::new(2, 2, 3, 1), 4))).to_bytes();
        let text = String::from_utf8_lossy(&good[..find(&good, END.as_bytes()).unwrap()]).to_string();
        let cases: Vec<Vec<u8>> = vec![
            b"hello".to_vec(),
            good[..good.len() - 3].to_vec(),
            [good.clone(), vec![0u8; 8]].concat(),
            good.iter().copied().map(|c| if c == b'1' { b'9' } else { c }).take(text.len()).chain(good[text.len()..].iter().copied()).collect(),
            text.replace("kind = mixlora", "kind = conv").into_bytes().into_iter().chain(good[text.len()..].iter().copied()).collect(),
            text.replace("format_version = 1", "format_version = 7").into_bytes().into_iter().chain(good[text.len()..].iter().copied()).collect(),
        ];
        for (i, c) in cases.iter().enumerate() {
            assert!(matches!(Checkpoint::from_bytes(c), Err(Error::Format(_))), "case {i}");
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/dir/model.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
