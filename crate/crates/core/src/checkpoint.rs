//! JSON checkpoints for every trainable model kind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::MultiInvex;
use crate::error::{Error, Result};
use crate::gcgp::{BasicInvex, ComposedInvex, GuidedInvex, LipschitzMethod};
use crate::invex::InvexComposite;
use crate::nn::{ConvexNet, Mlp};
use crate::verify::ScalarField;

pub const FORMAT_VERSION: u32 = 1;

/// Name and seed of a generated dataset, or the path of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Model {
    /// Unconstrained single-logit network; positive where the output is > 0.
    Ordinary { net: Mlp, positive_class: usize },
    /// Input-convex network; positive where the output is > 0.
    Convex { net: ConvexNet, positive_class: usize },
    InvexBasic(BasicInvex),
    InvexModified(ComposedInvex),
    InvexGuided(GuidedInvex),
    InvexInvertible(InvexComposite),
    MultiInvex(MultiInvex),
    Lipschitz { net: Mlp, method: LipschitzMethod, target_k: f64 },
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Ordinary { .. } => "ordinary",
            Model::Convex { .. } => "convex",
            Model::InvexBasic(_) => "invex_basic",
            Model::InvexModified(_) => "invex_modified",
            Model::InvexGuided(_) => "invex_guided",
            Model::InvexInvertible(_) => "invex_invertible",
            Model::MultiInvex(_) => "multi_invex",
            Model::Lipschitz { .. } => "lipschitz",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::MultiInvex(m) => m.backbone.dim,
            other => other.scalar_field().expect("scalar model").input_dim(),
        }
    }

    /// The scalar output of single-output models.
    pub fn scalar_field(&self) -> Option<&dyn ScalarField> {
        Some(match self {
            Model::Ordinary { net, .. } | Model::Lipschitz { net, .. } => net,
            Model::Convex { net, .. } => net,
            Model::InvexBasic(m) => m,
            Model::InvexModified(m) => m,
            Model::InvexGuided(m) => m,
            Model::InvexInvertible(m) => m,
            Model::MultiInvex(_) => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    #[serde(flatten)]
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, dataset: Option<DatasetRef>) -> Self {
        Self {
            version: FORMAT_VERSION,
            dataset,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format version {} (expected {FORMAT_VERSION})",
                c.version
            )));
        }
        if let Model::MultiInvex(m) = &c.model {
            m.state.validate()?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
