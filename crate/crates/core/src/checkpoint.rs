//! Binary checkpoints: a versioned header, the run config as TOML, and a flat
//! list of named little-endian f64 tensors.
//!
//! Layout: `EPCK` magic, `u32` version, `u64`-prefixed UTF-8 strings for the
//! config, cell and seed, a `u32` tensor count, then per tensor a name,
//! `u32` rank, `u64` dims and the row-major data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentParams};
use crate::config::{CellName, RunConfig};
use crate::harness::Run;
use crate::maze::{GoalTransform, WaterMaze};
use crate::nn::Mlp;
use crate::reservoir::Reservoir;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub cell: CellName,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

fn push_matrix(out: &mut Vec<Tensor>, name: String, m: &Array2<f64>) {
    out.push(Tensor {
        name,
        shape: vec![m.nrows(), m.ncols()],
        data: m.iter().copied().collect(),
    });
}

fn push_vector(out: &mut Vec<Tensor>, name: String, v: &Array1<f64>) {
    out.push(Tensor {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    });
}

fn push_params(out: &mut Vec<Tensor>, prefix: &str, params: &AgentParams) {
    for (group, mlp) in params.groups() {
        for (l, layer) in mlp.layers.iter().enumerate() {
            push_matrix(out, format!("{prefix}.{group}.{l}.weight"), &layer.weight);
            push_vector(out, format!("{prefix}.{group}.{l}.bias"), &layer.bias);
        }
    }
}

impl Checkpoint {
    pub fn from_run(run: &Run) -> Self {
        let agent = &run.agent;
        let mut tensors = Vec::new();
        push_matrix(
            &mut tensors,
            "reservoir.recurrent".into(),
            agent.reservoir.recurrent_weights(),
        );
        push_matrix(
            &mut tensors,
            "reservoir.input".into(),
            agent.reservoir.input_weights(),
        );
        push_vector(&mut tensors, "bias".into(), &agent.bias);
        push_params(&mut tensors, "online", &agent.online);
        push_params(&mut tensors, "target", &agent.target);
        for (g, w) in run.env.transform().matrices.iter().enumerate() {
            push_matrix(&mut tensors, format!("transform.{g}"), w);
        }
        Self {
            config: run.cfg.clone(),
            cell: run.condition.name,
            seed: run.seed,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn mismatch(&self, msg: String) -> Error {
        Error::Checkpoint {
            path: format!("{}/{}", self.cell, self.seed).into(),
            msg,
        }
    }

    fn matrix(&self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| self.mismatch(format!("missing tensor `{name}`")))?;
        if t.shape != [shape.0, shape.1] {
            return Err(self.mismatch(format!(
                "tensor `{name}` has shape {:?}, expected [{}, {}]",
                t.shape, shape.0, shape.1
            )));
        }
        Ok(Array2::from_shape_vec(shape, t.data.clone()).expect("shape checked"))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| self.mismatch(format!("missing tensor `{name}`")))?;
        if t.shape != [len] {
            return Err(self.mismatch(format!(
                "tensor `{name}` has shape {:?}, expected [{len}]",
                t.shape
            )));
        }
        Ok(Array1::from(t.data.clone()))
    }

    fn load_params(&self, prefix: &str, params: &mut AgentParams) -> Result<()> {
        for (group, mlp) in params.groups_mut() {
            let mlp: &mut Mlp = mlp;
            for (l, layer) in mlp.layers.iter_mut().enumerate() {
                layer.weight =
                    self.matrix(&format!("{prefix}.{group}.{l}.weight"), layer.weight.dim())?;
                layer.bias =
                    self.vector(&format!("{prefix}.{group}.{l}.bias"), layer.bias.len())?;
            }
        }
        Ok(())
    }

    /// Rebuilds the trained agent. Every tensor must match the shapes implied
    /// by the stored config.
    pub fn restore_agent(&self) -> Result<Agent> {
        let condition = self.cell.condition();
        let obs_dim = WaterMaze::obs_dim_for(&self.config.env, condition.env_variant);
        // initial weights are overwritten below; the draw only fixes shapes
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agent = Agent::new(&mut rng, &self.config, condition.retrieval_mode, obs_dim);
        let n = self.config.reservoir.n_units;
        let d_in = agent.reservoir.d_in;
        let recurrent = self.matrix("reservoir.recurrent", (n, n))?;
        let input = self.matrix("reservoir.input", (n, d_in))?;
        agent.reservoir = Reservoir::from_weights(&self.config.reservoir, recurrent, input);
        agent.bias = self.vector("bias", agent.bias.len())?;
        self.load_params("online", &mut agent.online)?;
        self.load_params("target", &mut agent.target)?;
        Ok(agent)
    }

    pub fn transform(&self) -> Result<GoalTransform> {
        let d = self.config.env.d_ctx;
        let goals = self.cell.condition().env_variant.num_goals();
        let matrices = (0..goals)
            .map(|g| self.matrix(&format!("transform.{g}"), (d, d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GoalTransform { matrices })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [
            self.config.to_toml_string(),
            self.cell.to_string(),
            self.seed.to_string(),
        ] {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint {
            path: path.into(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(&err)? != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32().map_err(&err)?;
        if version != VERSION {
            return Err(err(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let config_text = r.string().map_err(&err)?;
        let cell: CellName = r
            .string()
            .map_err(&err)?
            .parse()
            .map_err(|e: Error| err(e.to_string()))?;
        let seed: u64 = r
            .string()
            .map_err(&err)?
            .parse()
            .map_err(|e| err(format!("bad seed: {e}")))?;
        let config = RunConfig::from_toml_str(&config_text, None)
            .map_err(|e| err(format!("embedded config: {e}")))?;
        let count = r.u32().map_err(&err)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string().map_err(&err)?;
            let rank = r.u32().map_err(&err)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&err)?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8).map_err(&err)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config,
            cell,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads a checkpoint and checks that it was produced under `expected`.
    pub fn load_matching(path: &Path, expected: &RunConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.env != expected.env
            || ck.config.reservoir != expected.reservoir
            || ck.config.memory != expected.memory
            || ck.config.agent != expected.agent
        {
            return Err(Error::Checkpoint {
                path: path.into(),
                msg: "config mismatch: checkpoint was written with different environment or model settings".into(),
            });
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
