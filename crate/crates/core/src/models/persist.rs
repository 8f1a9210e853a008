use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    Activation, PartitionPolyModel, PartitionSkeleton, ResidualNetModel, TerminalQuadratic, ThetaVector, ValueModel,
};
use crate::error::{Error, Result};

/// Model family tag with the layout metadata needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    ResidualNet {
        arch: Vec<usize>,
        activation: Activation,
    },
    PartitionPoly {
        epsilon: f64,
        state_dim: usize,
        half_width: f64,
    },
}

/// On-disk form of a trained model: family, terminal data and `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub family: ModelFamily,
    pub horizon: f64,
    pub alpha: f64,
    pub q2tq2: Vec<Vec<f64>>,
    pub terminal_target: Vec<f64>,
    pub n_params: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum StoredModel {
    ResidualNet(ResidualNetModel),
    PartitionPoly(PartitionPolyModel),
}

impl StoredModel {
    pub fn as_value_model(&self) -> &dyn ValueModel {
        match self {
            StoredModel::ResidualNet(m) => m,
            StoredModel::PartitionPoly(m) => m,
        }
    }

    fn family(&self) -> ModelFamily {
        match self {
            StoredModel::ResidualNet(m) => ModelFamily::ResidualNet {
                arch: m.arch().to_vec(),
                activation: m.activation(),
            },
            StoredModel::PartitionPoly(m) => ModelFamily::PartitionPoly {
                epsilon: m.skeleton().eps(),
                state_dim: m.skeleton().state_dim(),
                half_width: m.skeleton().half_width(),
            },
        }
    }

    fn terminal(&self) -> &TerminalQuadratic {
        match self {
            StoredModel::ResidualNet(m) => m.terminal(),
            StoredModel::PartitionPoly(m) => m.terminal(),
        }
    }
}

impl ModelDocument {
    pub fn new(model: &StoredModel, theta: &[f64]) -> Result<Self> {
        let vm = model.as_value_model();
        if theta.len() != vm.n_params() {
            return Err(Error::Contract(format!(
                "θ has {} entries, model expects {}",
                theta.len(),
                vm.n_params()
            )));
        }
        let term = model.terminal();
        let q = &term.q2tq2;
        Ok(Self {
            family: model.family(),
            horizon: vm.horizon(),
            alpha: term.alpha,
            q2tq2: (0..q.nrows()).map(|r| q.row(r).iter().copied().collect()).collect(),
            terminal_target: term.target.as_slice().to_vec(),
            n_params: theta.len(),
            params: theta.to_vec(),
        })
    }

    pub fn into_model(self) -> Result<(StoredModel, ThetaVector)> {
        let n = self.terminal_target.len();
        if self.q2tq2.len() != n || self.q2tq2.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("q2tq2 must be an n x n matrix".into()));
        }
        let terminal = TerminalQuadratic {
            alpha: self.alpha,
            q2tq2: DMatrix::from_fn(n, n, |r, c| self.q2tq2[r][c]),
            target: DVector::from_vec(self.terminal_target),
        };
        let model = match self.family {
            ModelFamily::ResidualNet { arch, activation } => {
                StoredModel::ResidualNet(ResidualNetModel::from_arch(terminal, self.horizon, &arch, activation)?)
            }
            ModelFamily::PartitionPoly {
                epsilon,
                state_dim,
                half_width,
            } => {
                let skeleton = PartitionSkeleton::build(epsilon, state_dim, half_width)?;
                StoredModel::PartitionPoly(PartitionPolyModel::new(skeleton, terminal, self.horizon)?)
            }
        };
        let expected = model.as_value_model().n_params();
        if self.params.len() != expected || self.n_params != expected {
            return Err(Error::Contract(format!(
                "stored parameter array has {} entries (declared {}), layout requires {expected}",
                self.params.len(),
                self.n_params
            )));
        }
        Ok((model, self.params))
    }
}

pub fn save_model(path: &Path, model: &StoredModel, theta: &[f64]) -> Result<()> {
    let doc = ModelDocument::new(model, theta)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(StoredModel, ThetaVector)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ModelDocument =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    doc.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terminal() -> TerminalQuadratic {
        TerminalQuadratic {
            alpha: 0.25,
            q2tq2: DMatrix::identity(2, 2),
            target: DVector::from_vec(vec![0.5, -0.1]),
        }
    }

    #[test]
    fn resnet_round_trip() {
        let net = ResidualNetModel::new(terminal(), 2.0, &[5], Activation::SinCos).unwrap();
        let theta = net.init_theta(9);
        let model = StoredModel::ResidualNet(net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.json");
        save_model(&path, &model, &theta).unwrap();
        let (back, theta2) = load_model(&path).unwrap();
        assert_eq!(theta, theta2);
        let y = DVector::from_vec(vec![0.3, 0.7]);
        assert_eq!(
            back.as_value_model().value(&theta2, 0.4, &y),
            model.as_value_model().value(&theta, 0.4, &y)
        );
    }

    #[test]
    fn rejects_wrong_length() {
        let net = ResidualNetModel::new(terminal(), 2.0, &[5], Activation::SinCos).unwrap();
        let theta = net.init_theta(1);
        let mut doc = ModelDocument::new(&StoredModel::ResidualNet(net), &theta).unwrap();
        doc.params.pop();
        assert!(matches!(doc.into_model(), Err(Error::Contract(_))));
    }
}
