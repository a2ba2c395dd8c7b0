//! Versioned JSON model document. Arrays are base64 of little-endian f32,
//! so a save/load round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glle::{Branch, BranchModel, FusedModel, Layer, Topology};
use crate::local_adapt::CurveParams;
use crate::tensor::{BNParams, ConvKernel};
use crate::training::TrainModel;

pub const FORMAT_VERSION: u32 = 1;

/// How a model came to be.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelData {
    /// Multi-branch training model with its curve (a training checkpoint).
    Branch(TrainModel<f32>),
    /// Deployable single-conv model.
    Fused(FusedModel<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    /// Topology the model was trained with (kept after fusion).
    pub topology: Topology,
    pub provenance: Provenance,
    pub model: ModelData,
}

impl ModelFile {
    pub fn branch(model: TrainModel<f32>, provenance: Provenance) -> Self {
        Self {
            topology: model.glle.topology,
            provenance,
            model: ModelData::Branch(model),
        }
    }

    pub fn fused(model: FusedModel<f32>, topology: Topology, provenance: Provenance) -> Self {
        Self {
            topology,
            provenance,
            model: ModelData::Fused(model),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            ModelData::Branch(_) => "branch",
            ModelData::Fused(_) => "fused",
        }
    }

    /// The deployable model, collapsing a branch checkpoint if needed.
    pub fn to_fused(&self) -> Result<FusedModel<f32>> {
        match &self.model {
            ModelData::Branch(m) => m.fuse(),
            ModelData::Fused(m) => Ok(m.clone()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Doc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Doc = serde_json::from_str(s)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

fn encode(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| bad(format!("{what}: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(bad(format!(
            "{what}: {} bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Doc {
    format_version: u32,
    topology: String,
    pool_k: usize,
    curve: CurveDoc,
    provenance: Provenance,
    #[serde(flatten)]
    body: Body,
}

/// Curve coefficients widened to f64, which is exact and keeps them readable.
#[derive(Serialize, Deserialize)]
struct CurveDoc {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl From<CurveParams<f32>> for CurveDoc {
    fn from(c: CurveParams<f32>) -> Self {
        Self {
            alpha: c.alpha.into(),
            beta: c.beta.into(),
            gamma: c.gamma.into(),
        }
    }
}

impl TryFrom<CurveDoc> for CurveParams<f32> {
    type Error = Error;
    fn try_from(d: CurveDoc) -> Result<Self> {
        let narrow = |v: f64, name: &str| {
            let f = v as f32;
            if f64::from(f) == v && f.is_finite() {
                Ok(f)
            } else {
                Err(bad(format!("curve.{name} = {v} is not a finite f32")))
            }
        };
        Ok(CurveParams::new(
            narrow(d.alpha, "alpha")?,
            narrow(d.beta, "beta")?,
            narrow(d.gamma, "gamma")?,
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Body {
    Branch { branches: Vec<BranchDoc> },
    Fused { kernel: KernelDoc },
}

#[derive(Serialize, Deserialize)]
struct KernelDoc {
    c_out: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
    weight: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerDoc {
    Conv {
        kernel: KernelDoc,
        padding: [usize; 2],
    },
    AvgPool {
        k: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct BnDoc {
    eps: String,
    mu: String,
    sigma: String,
    gamma: String,
    beta: String,
}

#[derive(Serialize, Deserialize)]
struct BranchDoc {
    layers: Vec<LayerDoc>,
    bn: BnDoc,
}

impl From<&ConvKernel<f32>> for KernelDoc {
    fn from(k: &ConvKernel<f32>) -> Self {
        Self {
            c_out: k.c_out(),
            c_in: k.c_in(),
            k_h: k.k_h(),
            k_w: k.k_w(),
            weight: encode(k.weight()),
            bias: encode(k.bias()),
        }
    }
}

impl TryFrom<KernelDoc> for ConvKernel<f32> {
    type Error = Error;
    fn try_from(d: KernelDoc) -> Result<Self> {
        ConvKernel::new(
            d.c_out,
            d.c_in,
            d.k_h,
            d.k_w,
            decode(&d.weight, "weight")?,
            decode(&d.bias, "bias")?,
        )
        .map_err(|e| bad(e.to_string()))
    }
}

impl From<&Branch<f32>> for BranchDoc {
    fn from(b: &Branch<f32>) -> Self {
        Self {
            layers: b
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { kernel, padding } => LayerDoc::Conv {
                        kernel: kernel.into(),
                        padding: *padding,
                    },
                    Layer::AvgPool { k } => LayerDoc::AvgPool { k: *k },
                })
                .collect(),
            bn: BnDoc {
                eps: encode(&[b.bn.eps]),
                mu: encode(&b.bn.mu),
                sigma: encode(&b.bn.sigma),
                gamma: encode(&b.bn.gamma),
                beta: encode(&b.bn.beta),
            },
        }
    }
}

impl TryFrom<BranchDoc> for Branch<f32> {
    type Error = Error;
    fn try_from(d: BranchDoc) -> Result<Self> {
        let layers = d
            .layers
            .into_iter()
            .map(|l| {
                Ok(match l {
                    LayerDoc::Conv { kernel, padding } => Layer::Conv {
                        kernel: kernel.try_into()?,
                        padding,
                    },
                    LayerDoc::AvgPool { k } => Layer::AvgPool { k },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let eps = match decode(&d.bn.eps, "bn.eps")?[..] {
            [e] => e,
            _ => return Err(bad("bn.eps must hold exactly one value")),
        };
        let bn = BNParams {
            mu: decode(&d.bn.mu, "bn.mu")?,
            sigma: decode(&d.bn.sigma, "bn.sigma")?,
            gamma: decode(&d.bn.gamma, "bn.gamma")?,
            beta: decode(&d.bn.beta, "bn.beta")?,
            eps,
        };
        bn.validate().map_err(|e| bad(e.to_string()))?;
        let b = Branch { layers, bn };
        b.validate().map_err(|e| bad(e.to_string()))?;
        Ok(b)
    }
}

impl From<&ModelFile> for Doc {
    fn from(f: &ModelFile) -> Self {
        let (pool_k, curve, body) = match &f.model {
            ModelData::Branch(m) => (
                m.pool_k,
                m.curve,
                Body::Branch {
                    branches: m.glle.branches.iter().map(BranchDoc::from).collect(),
                },
            ),
            ModelData::Fused(m) => (
                m.pool_k,
                m.curve,
                Body::Fused {
                    kernel: (&m.kernel).into(),
                },
            ),
        };
        Doc {
            format_version: FORMAT_VERSION,
            topology: f.topology.tag().to_string(),
            pool_k,
            curve: curve.into(),
            provenance: f.provenance,
            body,
        }
    }
}

impl TryFrom<Doc> for ModelFile {
    type Error = Error;
    fn try_from(d: Doc) -> Result<Self> {
        if d.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                d.format_version
            )));
        }
        let topology: Topology = d.topology.parse().map_err(|e: Error| bad(e.to_string()))?;
        if d.pool_k % 2 == 0 {
            return Err(bad(format!("pool_k {} must be odd", d.pool_k)));
        }
        let curve: CurveParams<f32> = d.curve.try_into()?;
        let model = match d.body {
            Body::Branch { branches } => {
                let glle = BranchModel {
                    topology,
                    branches: branches
                        .into_iter()
                        .map(Branch::try_from)
                        .collect::<Result<_>>()?,
                };
                glle.validate().map_err(|e| bad(e.to_string()))?;
                ModelData::Branch(TrainModel::new(glle, curve, d.pool_k))
            }
            Body::Fused { kernel } => ModelData::Fused(
                FusedModel::new(kernel.try_into()?, curve, d.pool_k)
                    .map_err(|e| bad(e.to_string()))?,
            ),
        };
        Ok(Self {
            topology,
            provenance: d.provenance,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glle::build_topology;

    fn checkpoint() -> ModelFile {
        let mut m = TrainModel::new(
            build_topology::<f32>(Topology::DiverseBranch, 5),
            CurveParams::init(),
            7,
        );
        m.glle.branches[1].bn.mu = vec![0.1, -0.25, 1e-7];
        m.glle.branches[0].bn.sigma[2] = 3.7;
        ModelFile::branch(m, Provenance { seed: 5, steps: 12 })
    }

    #[test]
    fn branch_round_trip_is_bitwise() {
        let f = checkpoint();
        let json = f.to_json().unwrap();
        let back = ModelFile::from_json(&json).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_json().unwrap(), json);
        assert!(json.contains("\"kind\": \"branch\"") && json.contains("\"format_version\": 1"));
    }

    #[test]
    fn fused_round_trip_holds_87_scalars() {
        let f = checkpoint();
        let fused = ModelFile::fused(f.to_fused().unwrap(), f.topology, f.provenance);
        let back = ModelFile::from_json(&fused.to_json().unwrap()).unwrap();
        assert_eq!(back, fused);
        assert_eq!(back.kind(), "fused");
        assert_eq!(back.topology, Topology::DiverseBranch);
        let ModelData::Fused(m) = &back.model else {
            panic!("expected a fused model")
        };
        assert_eq!(m.param_count(), 87);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let f = checkpoint();
        f.save(&p).unwrap();
        assert_eq!(ModelFile::load(&p).unwrap(), f);
    }

    #[test]
    fn rejects_malformed_documents() {
        let json = checkpoint().to_json().unwrap();
        let v2 = json.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            ModelFile::from_json(&v2),
            Err(Error::ModelFormat(_))
        ));
        let topo = json.replace("\"topology\": \"db\"", "\"topology\": \"xx\"");
        assert!(matches!(
            ModelFile::from_json(&topo),
            Err(Error::ModelFormat(_))
        ));
        let even = json.replace("\"pool_k\": 7", "\"pool_k\": 6");
        assert!(ModelFile::from_json(&even).is_err());
        assert!(ModelFile::from_json("{}").is_err());
        let inexact = json.replace("\"alpha\": 0.6000000238418579", "\"alpha\": 0.6");
        assert_ne!(inexact, json);
        assert!(ModelFile::from_json(&inexact).is_err());
        assert!(decode("AAAA", "x").is_err());
        assert_eq!(
            decode(&encode(&[1.5, -0.0]), "x").unwrap()[1].to_bits(),
            (-0.0f32).to_bits()
        );
    }
}
