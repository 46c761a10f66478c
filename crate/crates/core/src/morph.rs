//! Network morphism: scripted add/remove/fine-tune edits of a multi-region
//! classifier, with a replayable log.

use serde::{Deserialize, Serialize};

use crate::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig, RegionReport};
use crate::datasets::Dataset;
use crate::error::{Error, Result};

/// Fine-tuning steps used when a script or request gives none.
pub const DEFAULT_FINETUNE_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MorphOp {
    Add { x: f64, y: f64, class: usize },
    Remove { region_id: usize },
    Finetune { steps: usize },
}

impl std::fmt::Display for MorphOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MorphOp::Add { x, y, class } => write!(f, "add {x} {y} {class}"),
            MorphOp::Remove { region_id } => write!(f, "remove {region_id}"),
            MorphOp::Finetune { steps } => write!(f, "finetune {steps}"),
        }
    }
}

/// Parses one op per line: `add X Y CLASS`, `remove REGION`, `finetune [STEPS]`.
/// Blank lines and `#` comments are ignored. Errors carry the 1-based line
/// number and the 1-based position of the offending word.
pub fn parse_script(text: &str) -> Result<Vec<MorphOp>> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            row: i + 1,
            column,
            message,
        };
        let words: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<f64> {
            words[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(k + 1, format!("expected a number, got {:?}", words[k])))
        };
        let int = |k: usize| -> Result<usize> {
            words[k]
                .parse::<usize>()
                .map_err(|_| err(k + 1, format!("expected a non-negative integer, got {:?}", words[k])))
        };
        let op = match (words[0], words.len()) {
            ("add", 4) => MorphOp::Add {
                x: num(1)?,
                y: num(2)?,
                class: int(3)?,
            },
            ("remove", 2) => MorphOp::Remove { region_id: int(1)? },
            ("finetune", 1) => MorphOp::Finetune {
                steps: DEFAULT_FINETUNE_STEPS,
            },
            ("finetune", 2) => {
                let steps = int(1)?;
                if steps == 0 {
                    return Err(err(2, "finetune needs at least 1 step".into()));
                }
                MorphOp::Finetune { steps }
            }
            _ => return Err(err(1, format!("unrecognised op {line:?}"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Outcome of one applied op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphStep {
    pub op: MorphOp,
    pub regions: usize,
    pub accuracy_before: f64,
    pub accuracy: f64,
    pub revision: u64,
    /// Dataset indices whose hard region changed, after renumbering for removals.
    pub reassigned: Vec<usize>,
}

/// Applies `op` to `model`. Fine-tuning uses `finetune` with its step count replaced.
pub fn apply(model: &mut MultiInvex, data: &Dataset, op: &MorphOp, finetune: &MultiTrainConfig) -> Result<MorphStep> {
    if data.dim() != model.backbone.dim {
        return Err(Error::Dimension {
            expected: model.backbone.dim,
            got: data.dim(),
        });
    }
    let before = model.hard_regions(&data.x)?;
    let accuracy_before = model.accuracy(data, true)?;
    match *op {
        MorphOp::Add { x, y, class } => {
            if model.backbone.dim != 2 {
                return Err(Error::invalid("scripted add needs a 2D model"));
            }
            model.add_region(&[x, y], class)?;
        }
        MorphOp::Remove { region_id } => model.remove_region(region_id)?,
        MorphOp::Finetune { steps } => {
            if steps == 0 {
                return Err(Error::invalid("finetune needs at least 1 step"));
            }
            let cfg = MultiTrainConfig {
                steps,
                ..finetune.clone()
            };
            train_multi_invex(model, data, &cfg)?;
        }
    }
    let after = model.hard_regions(&data.x)?;
    let renumber = |r: usize| match *op {
        MorphOp::Remove { region_id } if r > region_id => Some(r - 1),
        MorphOp::Remove { region_id } if r == region_id => None,
        _ => Some(r),
    };
    let reassigned = before
        .iter()
        .zip(&after)
        .enumerate()
        .filter(|(_, (b, a))| renumber(**b) != Some(**a))
        .map(|(i, _)| i)
        .collect();
    Ok(MorphStep {
        op: op.clone(),
        regions: model.state.num_regions(),
        accuracy_before,
        accuracy: model.accuracy(data, true)?,
        revision: model.state.revision,
        reassigned,
    })
}

/// Applies every op in order on a copy; `model` is replaced only if all succeed.
pub fn run_script(model: &mut MultiInvex, data: &Dataset, ops: &[MorphOp], finetune: &MultiTrainConfig) -> Result<Vec<MorphStep>> {
    let mut work = model.clone();
    let mut steps = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let step = apply(&mut work, data, op, finetune).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("op {} ({op}): {m}", i + 1)),
            other => other,
        })?;
        steps.push(step);
    }
    *model = work;
    Ok(steps)
}

/// Region with the lowest accuracy (empty regions count as 0), fewest points on ties.
pub fn worst_region(reports: &[RegionReport]) -> Option<usize> {
    reports
        .iter()
        .min_by(|a, b| {
            let key = |r: &RegionReport| (r.accuracy.unwrap_or(0.0), r.num_points);
            key(a).partial_cmp(&key(b)).expect("finite accuracies")
        })
        .map(|r| r.region_id)
}

/// A model, its data and the ops applied since `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphismSession {
    pub initial: MultiInvex,
    pub model: MultiInvex,
    pub data: Dataset,
    pub finetune: MultiTrainConfig,
    pub log: Vec<MorphOp>,
}

impl MorphismSession {
    pub fn new(model: MultiInvex, data: Dataset, finetune: MultiTrainConfig) -> Result<Self> {
        if data.dim() != model.backbone.dim {
            return Err(Error::Dimension {
                expected: model.backbone.dim,
                got: data.dim(),
            });
        }
        Ok(Self {
            initial: model.clone(),
            model,
            data,
            finetune,
            log: Vec::new(),
        })
    }

    pub fn revision(&self) -> u64 {
        self.model.state.revision
    }

    /// Applies `op` and appends it to the log; on error the session is unchanged.
    pub fn apply(&mut self, op: MorphOp) -> Result<MorphStep> {
        let mut work = self.model.clone();
        let step = apply(&mut work, &self.data, &op, &self.finetune)?;
        self.model = work;
        self.log.push(op);
        Ok(step)
    }

    /// Re-runs the log from the initial model.
    pub fn replay(&self) -> Result<MultiInvex> {
        let mut m = self.initial.clone();
        for op in &self.log {
            apply(&mut m, &self.data, op, &self.finetune)?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ops_and_comments() {
        let ops = parse_script("# demo\nadd -1 -1 2\n\nremove 3  # worst\nfinetune\nfinetune 50\n").unwrap();
        assert_eq!(
            ops,
            vec![
                MorphOp::Add { x: -1.0, y: -1.0, class: 2 },
                MorphOp::Remove { region_id: 3 },
                MorphOp::Finetune {
                    steps: DEFAULT_FINETUNE_STEPS
                },
                MorphOp::Finetune { steps: 50 },
            ]
        );
        assert!(parse_script("").unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [("add 1 2\n", 1), ("finetune 5\nremove x\n", 2), ("\n\njump 1\n", 3), ("finetune 0", 1)] {
            match parse_script(text) {
                Err(Error::Parse { row, .. }) => assert_eq!(row, line, "{text:?}"),
                other => panic!("expected a parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let ops = vec![
            MorphOp::Add { x: 0.5, y: -1.0, class: 1 },
            MorphOp::Remove { region_id: 2 },
            MorphOp::Finetune { steps: 10 },
        ];
        let text: String = ops.iter().map(|o| format!("{o}\n")).collect();
        assert_eq!(parse_script(&text).unwrap(), ops);
    }
}
