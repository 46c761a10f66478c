//! Run configuration: a TOML or JSON file merged with command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use invexnet::gcgp::LipschitzMethod;
use invexnet::nn::Activation;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ordinary,
    Convex,
    InvexBasic,
    InvexModified,
    InvexGuided,
    InvexInvertible,
    MultiInvex,
    Lipschitz(LipschitzMethod),
}

impl Method {
    /// Methods whose loss includes a `lambda`-weighted constraint penalty.
    pub fn needs_lambda(self) -> bool {
        matches!(
            self,
            Method::InvexBasic
                | Method::InvexModified
                | Method::InvexGuided
                | Method::Lipschitz(LipschitzMethod::Gp | LipschitzMethod::Lp | LipschitzMethod::Gcgp)
        )
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ordinary" => Method::Ordinary,
            "convex" => Method::Convex,
            "invex_basic" => Method::InvexBasic,
            "invex_modified" => Method::InvexModified,
            "invex_guided" => Method::InvexGuided,
            "invex_invertible" => Method::InvexInvertible,
            "multi_invex" => Method::MultiInvex,
            _ => match s.strip_prefix("lipschitz:") {
                Some(m) => Method::Lipschitz(m.parse().map_err(|e: invexnet::Error| e.to_string())?),
                None => {
                    return Err(format!(
                        "unknown method '{s}' (expected ordinary, convex, invex_basic, invex_modified, invex_guided, \
                         invex_invertible, multi_invex or lipschitz:{{gp,lp,sn,gcgp}})"
                    ))
                }
            },
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Ordinary => "ordinary",
            Method::Convex => "convex",
            Method::InvexBasic => "invex_basic",
            Method::InvexModified => "invex_modified",
            Method::InvexGuided => "invex_guided",
            Method::InvexInvertible => "invex_invertible",
            Method::MultiInvex => "multi_invex",
            Method::Lipschitz(m) => {
                return write!(f, "lipschitz:{}", format!("{m:?}").to_lowercase());
            }
        };
        f.write_str(s)
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Reference invex function for `invex_guided`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GuideKind {
    /// A basic invex network trained first on the same data.
    Basic,
    /// A unit cone at the inner-class mean.
    Cone,
}

/// Every field is optional here; [`RunConfig::resolve`] fills method defaults
/// and rejects missing required fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset name (spiral, regression1, regression2, clusters5, xor_groups, blobsK) or a CSV path.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Label column of a CSV dataset.
    #[arg(long)]
    pub label_column: Option<String>,
    /// ordinary | convex | invex_basic | invex_modified | invex_guided | invex_invertible | multi_invex | lipschitz:{gp,lp,sn,gcgp}
    #[arg(long)]
    pub method: Option<Method>,
    /// Penalty weight; required for the GC-GP family, gp and lp.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Class treated as the inside of the invex region (binary methods).
    #[arg(long)]
    pub inner_class: Option<usize>,
    /// Target Lipschitz constant for lipschitz:* methods.
    #[arg(long)]
    pub target_k: Option<f64>,
    /// Hidden widths of MLPs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Residual blocks of invertible backbones.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Hidden width of each residual subnet.
    #[arg(long)]
    pub block_hidden: Option<usize>,
    /// Layers per residual subnet.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Spectral coefficient of residual blocks, in (0, 1).
    #[arg(long)]
    pub coeff: Option<f64>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    /// Regions of a multi_invex model.
    #[arg(long)]
    pub regions: Option<usize>,
    /// Guide of invex_guided (default basic).
    #[arg(long, value_enum)]
    pub guide: Option<GuideKind>,
}

macro_rules! merge_fields {
    ($base:ident, $over:ident, $($f:ident),*) => {
        $( if $over.$f.is_some() { $base.$f = $over.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display()))),
            Some("toml") => toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display()))),
            _ => Err(CliError::config(format!("{}: config must be .toml or .json", path.display()))),
        }
    }

    /// Fields set in `other` replace those in `self`.
    pub fn merge(mut self, other: &RunConfig) -> Self {
        merge_fields!(
            self,
            other,
            dataset,
            label_column,
            method,
            lambda,
            steps,
            lr,
            seed,
            out,
            inner_class,
            target_k,
            hidden,
            activation,
            blocks,
            block_hidden,
            depth,
            coeff,
            batch_norm,
            regions,
            guide
        );
        self
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let method = self.method.ok_or_else(|| CliError::config("--method is required"))?;
        let dataset = self.dataset.clone().ok_or_else(|| CliError::config("--dataset is required"))?;
        let seed = self.seed.ok_or_else(|| CliError::config("--seed is required"))?;
        let lambda = match (method.needs_lambda(), self.lambda) {
            (true, None) => return Err(CliError::config(format!("--lambda is required for {method}"))),
            (_, Some(l)) if !(l.is_finite() && l >= 0.0) => return Err(CliError::config("--lambda must be finite and non-negative")),
            (_, l) => l.unwrap_or(0.0),
        };
        let (steps, lr, hidden, activation) = match method {
            Method::Ordinary | Method::Convex => (4000, 3e-3, vec![32, 32], Activation::LeakyRelu),
            Method::InvexBasic | Method::InvexModified | Method::InvexGuided => (8000, 3e-3, vec![32, 32], Activation::LeakyRelu),
            Method::InvexInvertible => (4000, 5e-3, vec![], Activation::LeakyRelu),
            Method::MultiInvex => (2000, 5e-3, vec![], Activation::LeakyRelu),
            Method::Lipschitz(_) => (7500, 1e-3, vec![10, 10], Activation::Elu),
        };
        let (blocks, batch_norm) = match method {
            Method::MultiInvex => (6, false),
            _ => (10, true),
        };
        let r = Resolved {
            method,
            dataset,
            label_column: self.label_column.clone().unwrap_or_else(|| "label".into()),
            lambda,
            steps: self.steps.unwrap_or(steps),
            lr: self.lr.unwrap_or(lr),
            seed,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            inner_class: self.inner_class.unwrap_or(1),
            target_k: self.target_k.unwrap_or(1.0),
            hidden: self.hidden.clone().unwrap_or(hidden),
            activation: self.activation.unwrap_or(if method == Method::Convex { Activation::Relu } else { activation }),
            blocks: self.blocks.unwrap_or(blocks),
            block_hidden: self.block_hidden.unwrap_or(16),
            depth: self.depth.unwrap_or(3),
            coeff: self.coeff.unwrap_or(0.97),
            batch_norm: self.batch_norm.unwrap_or(batch_norm),
            regions: self.regions.unwrap_or(7),
            guide: self.guide.unwrap_or(GuideKind::Basic),
        };
        r.validate()?;
        Ok(r)
    }
}

/// A complete, validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub method: Method,
    pub dataset: String,
    pub label_column: String,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub inner_class: usize,
    pub target_k: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub blocks: usize,
    pub block_hidden: usize,
    pub depth: usize,
    pub coeff: f64,
    pub batch_norm: bool,
    pub regions: usize,
    pub guide: GuideKind,
}

impl Resolved {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::config(m));
        if self.steps == 0 {
            return bad("--steps must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("--lr must be positive");
        }
        if !(self.target_k.is_finite() && self.target_k > 0.0) {
            return bad("--target-k must be positive");
        }
        if !(self.coeff > 0.0 && self.coeff < 1.0) {
            return bad("--coeff must be in (0, 1)");
        }
        if self.hidden.contains(&0) || self.block_hidden == 0 || self.depth == 0 || self.regions == 0 {
            return bad("widths, depth and regions must be positive");
        }
        let mlp = !matches!(self.method, Method::InvexInvertible | Method::MultiInvex);
        if mlp && self.hidden.is_empty() {
            return bad("--hidden needs at least one width");
        }
        if self.method == Method::Convex && !self.activation.is_convex_monotone() {
            return bad("convex nets need a convex non-decreasing activation (relu, leaky_relu, elu)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [&str; 11] = [
        "ordinary",
        "convex",
        "invex_basic",
        "invex_modified",
        "invex_guided",
        "invex_invertible",
        "multi_invex",
        "lipschitz:gp",
        "lipschitz:lp",
        "lipschitz:sn",
        "lipschitz:gcgp",
    ];

    #[test]
    fn method_names_round_trip() {
        for name in ALL {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert!("lipschitz:".parse::<Method>().is_err());
        assert!("invex".parse::<Method>().is_err());
    }

    #[test]
    fn lambda_requirement() {
        let needs: Vec<&str> = ALL.iter().copied().filter(|n| n.parse::<Method>().unwrap().needs_lambda()).collect();
        assert_eq!(needs, ["invex_basic", "invex_modified", "invex_guided", "lipschitz:gp", "lipschitz:lp", "lipschitz:gcgp"]);
    }

    #[test]
    fn flags_override_file_and_defaults_fill_in() {
        let file: RunConfig = toml::from_str("dataset = \"spiral\"\nmethod = \"invex_basic\"\nlambda = 2.0\nseed = 3\nsteps = 10\n").unwrap();
        let flags = RunConfig { steps: Some(20), ..Default::default() };
        let r = file.merge(&flags).resolve().unwrap();
        assert_eq!((r.steps, r.seed, r.lambda), (20, 3, 2.0));
        assert_eq!(r.hidden, [32, 32]);
        let r = RunConfig { method: Some(Method::Lipschitz(LipschitzMethod::Sn)), dataset: Some("regression2".into()), seed: Some(0), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!((r.steps, r.lr, r.activation, r.hidden.clone()), (7500, 1e-3, Activation::Elu, vec![10, 10]));
    }

    #[test]
    fn seed_is_mandatory() {
        let c = RunConfig { method: Some(Method::Ordinary), dataset: Some("spiral".into()), ..Default::default() };
        assert_eq!(c.resolve().unwrap_err().code, CliError::CONFIG);
    }
}
