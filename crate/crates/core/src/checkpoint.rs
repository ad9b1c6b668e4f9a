//! Checkpoint file format.
//!
//! A checkpoint is a UTF-8 header followed by binary blocks:
//!
//! ```text
//! MFUSE-CHECKPOINT 1
//! step=<completed steps>
//! optimizer_state=<adam|sgd>
//! adam_t=<updates applied>            (adam only)
//! history=<entries>
//! tensors=<count>
//! <training and model config as key=value lines>
//! end
//! ```
//!
//! then `count` tensors, each a line `<name> <n> <c> <h> <w>` followed by
//! `n*c*h*w` little-endian `f32` values. Model parameters come first, each
//! layer's `.weight` then `.bias` in network order (`stem1`, `branch1.*`,
//! `post1`, `stem2`, `branch2.*`, `post2`, `stem_avg`, `branch_avg.*`,
//! `recon.*`), followed by Adam moments named `adam.m.<param>` and
//! `adam.v.<param>`. Last comes the loss history: `history` entries of a
//! little-endian `u64` step and `f64` loss.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MfNetWeights;
use crate::optim::{AdamHyper, Optimizer, OptimizerKind};
use crate::tensor::{ConvParams, Shape, Tensor};
use crate::train::TrainConfig;

const MAGIC: &str = "MFUSE-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: MfNetWeights,
    pub config: TrainConfig,
    /// Number of completed training steps.
    pub step: u64,
    pub loss_history: Vec<(u64, f64)>,
    pub optimizer: Optimizer,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let params = self.weights.params();
        let moments: Vec<(String, &[f32], Shape)> = match &self.optimizer {
            Optimizer::Adam { m, v, .. } => {
                let mut all = Vec::new();
                for (kind, store) in [("m", m), ("v", v)] {
                    for (i, buf) in store.iter().enumerate() {
                        let (name, p) = &params[i];
                        all.push((format!("adam.{kind}.{name}"), buf.as_slice(), p.shape()));
                    }
                }
                all
            }
            Optimizer::Sgd => Vec::new(),
        };

        let mut header = format!("{MAGIC} {VERSION}\n");
        header += &format!("step={}\n", self.step);
        header += &format!("optimizer_state={}\n", self.optimizer.kind().name());
        if let Optimizer::Adam { t, .. } = &self.optimizer {
            header += &format!("adam_t={t}\n");
        }
        header += &format!("history={}\n", self.loss_history.len());
        header += &format!("tensors={}\n", params.len() + moments.len());
        let mut cfg = self.config.clone();
        cfg.model = self.weights.config().clone();
        for (k, v) in cfg.to_kv() {
            if v.contains('\n') || v.contains('#') {
                return Err(bad(format!("{k} value {v:?} cannot be stored")));
            }
            header += &format!("{k}={v}\n");
        }
        header += "end\n";
        out.write_all(header.as_bytes())?;

        let tensors = params
            .iter()
            .map(|(n, t)| (n.clone(), t.data(), t.shape()))
            .chain(moments);
        for (name, data, shape) in tensors {
            writeln!(
                out,
                "{name} {} {} {} {}",
                shape[0], shape[1], shape[2], shape[3]
            )?;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&bytes)?;
        }
        for &(step, loss) in &self.loss_history {
            out.write_all(&step.to_le_bytes())?;
            out.write_all(&loss.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Writes to a sibling temporary file first, so an existing checkpoint
    /// is never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut BufReader::new(bytes))
    }

    pub fn read_from(input: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |input: &mut dyn BufRead| -> Result<String> {
            line.clear();
            let n = input
                .read_line(&mut line)
                .map_err(|e| bad(format!("truncated header: {e}")))?;
            if n == 0 {
                return Err(bad("unexpected end of file"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        let first = next_line(input)?;
        match first.split_once(' ') {
            Some((MAGIC, v)) if v == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(bad(format!("unsupported version {v}"))),
            _ => return Err(bad("not a checkpoint file")),
        }

        let mut step = None;
        let mut opt_kind = None;
        let mut adam_t = 0u64;
        let mut history = None;
        let mut tensor_count = None;
        let mut cfg_text = String::new();
        loop {
            let l = next_line(input)?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
            let int = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| bad(format!("invalid {k} {v:?}")))
            };
            match k {
                "step" => step = Some(int(v)?),
                "optimizer_state" => {
                    opt_kind = Some(
                        OptimizerKind::parse(v).ok_or_else(|| bad(format!("optimizer {v:?}")))?,
                    )
                }
                "adam_t" => adam_t = int(v)?,
                "history" => history = Some(int(v)? as usize),
                "tensors" => tensor_count = Some(int(v)? as usize),
                _ => {
                    cfg_text.push_str(&l);
                    cfg_text.push('\n');
                }
            }
        }
        let step = step.ok_or_else(|| bad("missing step"))?;
        let opt_kind = opt_kind.ok_or_else(|| bad("missing optimizer_state"))?;
        let history = history.ok_or_else(|| bad("missing history"))?;
        let tensor_count = tensor_count.ok_or_else(|| bad("missing tensors"))?;
        let config = TrainConfig::parse(&cfg_text).map_err(|e| bad(format!("config: {e}")))?;
        config.model.validate()?;

        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let l = next_line(input)?;
            let mut parts = l.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| bad(format!("bad shape in {l:?}"))))
                .collect::<Result<_>>()?;
            let shape: Shape = dims
                .try_into()
                .map_err(|_| bad(format!("tensor line {l:?} needs four dimensions")))?;
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            input
                .read_exact(&mut bytes)
                .map_err(|_| bad(format!("truncated data for {name}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut loss_history = Vec::with_capacity(history);
        for _ in 0..history {
            let mut buf = [0u8; 16];
            input
                .read_exact(&mut buf)
                .map_err(|_| bad("truncated loss history"))?;
            let s = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
            let l = f64::from_le_bytes(buf[8..].try_into().expect("8 bytes"));
            loss_history.push((s, l));
        }

        let names = config.model.layout().layer_names();
        let mut it = tensors.into_iter();
        let mut take = |expected: &str| -> Result<Tensor<f32>> {
            match it.next() {
                Some((name, t)) if name == expected => Ok(t),
                Some((name, _)) => Err(bad(format!("expected tensor {expected}, found {name}"))),
                None => Err(bad(format!("missing tensor {expected}"))),
            }
        };
        let mut layers = Vec::with_capacity(names.len());
        for name in &names {
            let w = take(&format!("{name}.weight"))?;
            let b = take(&format!("{name}.bias"))?;
            layers.push(ConvParams::new(w, b)?);
        }
        let weights = MfNetWeights::from_layers(config.model.clone(), layers)?;
        let param_names: Vec<String> = weights.params().into_iter().map(|(n, _)| n).collect();
        let optimizer = match opt_kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                if adam_t > 0 {
                    for n in &param_names {
                        m.push(take(&format!("adam.m.{n}"))?.into_data());
                    }
                    for n in &param_names {
                        v.push(take(&format!("adam.v.{n}"))?.into_data());
                    }
                }
                Optimizer::Adam {
                    hyper: AdamHyper::default(),
                    t: adam_t,
                    m,
                    v,
                }
            }
        };
        if let Some((name, _)) = it.next() {
            return Err(bad(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint {
            weights,
            config,
            step,
            loss_history,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MfNetConfig;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            data_dir: "data/synth".into(),
            model: MfNetConfig::tiny(),
            ..TrainConfig::default()
        };
        let mut weights = MfNetWeights::init(&cfg.model).unwrap();
        for p in weights.params_mut() {
            let g: Vec<f32> = (0..p.numel()).map(|i| (i as f32 * 0.37).sin()).collect();
            p.accumulate_grad(&g);
        }
        let mut optimizer = Optimizer::new(OptimizerKind::Adam);
        optimizer.step(weights.params_mut(), 1e-3, 1e-4);
        weights.zero_grad();
        Checkpoint {
            weights,
            config: cfg,
            step: 1,
            loss_history: vec![(0, 0.8123456789)],
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("MFUSE-CHECKPOINT 1\nstep=1\n"));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                Checkpoint::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        assert!(Checkpoint::from_bytes(b"PNG garbage\n").is_err());
    }
}
