//! Flat key-value run configuration with section headers.
//!
//! The format is line-oriented and diff-friendly:
//!
//! ```text
//! # comment
//! [backbone]
//! family = transformer
//! layers = 6
//! ...
//! ```
//!
//! Parse errors and schema violations carry their line number and field
//! name; the CLI maps them onto exit code 2.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::backbones::{BackboneSpec, Family};
use crate::error::{Error, Result};
use crate::harness::{ShiftParams, Strategy, StrategyKind, TaskKind, TaskSpec, TrainConfig, Warmup};
use crate::mtsa::{Aggregator, Insertion};

type Entries = BTreeMap<String, (usize, String)>;

/// Parsed but untyped configuration document.
pub struct ConfigDoc {
    sections: BTreeMap<String, Entries>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<ConfigDoc> {
        let mut sections: BTreeMap<String, Entries> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::ConfigParse {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                current = Some(name.trim().to_string());
                sections.entry(name.trim().to_string()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let section = current.clone().ok_or(Error::ConfigParse {
                line: line_no,
                msg: "key outside any [section]".into(),
            })?;
            let key = key.trim().to_string();
            let entries = sections.entry(section).or_default();
            if entries.contains_key(&key) {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            entries.insert(key, (line_no, value.trim().to_string()));
        }
        Ok(ConfigDoc { sections })
    }

    fn section(&self, name: &str) -> Result<&Entries> {
        self.sections.get(name).ok_or_else(|| Error::ConfigParse {
            line: 0,
            msg: format!("missing required section [{name}]"),
        })
    }

    fn check_keys(&self, name: &str, allowed: &[&str]) -> Result<()> {
        if let Some(entries) = self.sections.get(name) {
            for (key, (line, _)) in entries {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::ConfigParse {
                        line: *line,
                        msg: format!("unknown field `{key}` in [{name}]"),
                    });
                }
            }
        }
        Ok(())
    }
}

struct Section<'a> {
    name: &'a str,
    entries: &'a Entries,
}

impl<'a> Section<'a> {
    fn raw(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::ConfigParse {
                line: 0,
                msg: format!("missing required field `{key}` in [{}]", self.name),
            })
    }

    fn parse_with<T>(&self, key: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        let (line, v) = self.raw(key)?;
        f(v).ok_or_else(|| Error::ConfigParse {
            line,
            msg: format!("field `{key}`: expected {what}, got `{v}`"),
        })
    }

    fn u64(&self, key: &str) -> Result<u64> {
        self.parse_with(key, "an unsigned integer", |v| v.parse().ok())
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse_with(key, "an unsigned integer", |v| v.parse().ok())
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.parse_with(key, "a number", |v| v.parse().ok())
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.parse_with(key, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    fn opt(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.parse_with(key, "a comma-separated integer list", |v| {
            v.split(',')
                .map(|p| p.trim().parse().ok())
                .collect::<Option<Vec<usize>>>()
        })
    }
}

/// Fully typed run configuration.
pub struct RunFile {
    pub backbone: BackboneSpec,
    pub task: TaskSpec,
    pub strategy: Strategy,
    pub train: TrainConfig,
    /// Optional weights file the backbone parameters are loaded from.
    pub weights_file: Option<PathBuf>,
    /// Present when an [ablate] section exists.
    pub ablate: Option<AblateOptions>,
}

pub struct AblateOptions {
    pub strategies: Vec<Strategy>,
    pub reductions: Vec<usize>,
}

pub fn parse_run_file(text: &str) -> Result<RunFile> {
    let doc = ConfigDoc::parse(text)?;
    doc.check_keys(
        "backbone",
        &[
            "family", "layers", "model_dim", "heads", "seq_len", "dec_len", "input_dim",
            "stages", "input", "drop", "seed", "weights",
        ],
    )?;
    doc.check_keys(
        "task",
        &[
            "kind", "classes", "train", "val", "test", "angle", "remap", "noise", "stress",
            "seed",
        ],
    )?;
    doc.check_keys(
        "strategy",
        &["kind", "aggregator", "heads", "insertion", "reduction"],
    )?;
    doc.check_keys(
        "train",
        &[
            "learning_rate", "epochs", "batch_size", "warmup", "adam_beta1", "adam_beta2",
            "weight_decay", "seed",
        ],
    )?;
    doc.check_keys("ablate", &["strategies", "reductions"])?;

    let bb = Section {
        name: "backbone",
        entries: doc.section("backbone")?,
    };
    let (family_line, family_str) = bb.raw("family")?;
    let drop = match bb.opt("drop") {
        Some((line, v)) if !v.is_empty() => v
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| Error::ConfigParse {
                    line,
                    msg: format!("field `drop`: bad index `{p}`"),
                })
            })
            .collect::<Result<std::collections::BTreeSet<usize>>>()?,
        _ => Default::default(),
    };
    let seed = bb.u64("seed")?;
    let backbone = match family_str {
        "transformer" => BackboneSpec::transformer(
            bb.usize("layers")?,
            bb.usize("model_dim")?,
            bb.usize("heads")?,
            bb.usize("seq_len")?,
            bb.usize("input_dim")?,
            drop,
            seed,
        ),
        "cnn" => {
            let input = bb.parse_with("input", "CxHxW", |v| {
                let parts: Vec<usize> =
                    v.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
                (parts.len() == 3).then(|| (parts[0], parts[1], parts[2]))
            })?;
            BackboneSpec::cnn(bb.usize_list("stages")?, input, drop, seed)
        }
        "encoder_decoder" => BackboneSpec::encoder_decoder(
            bb.usize("layers")?,
            bb.usize("model_dim")?,
            bb.usize("heads")?,
            bb.usize("seq_len")?,
            bb.usize("dec_len")?,
            bb.usize("input_dim")?,
            drop,
            seed,
        ),
        other => {
            return Err(Error::ConfigParse {
                line: family_line,
                msg: format!(
                    "field `family`: expected transformer | cnn | encoder_decoder, got `{other}`"
                ),
            })
        }
    };
    let weights_file = bb.opt("weights").map(|(_, v)| PathBuf::from(v));

    let ts = Section {
        name: "task",
        entries: doc.section("task")?,
    };
    let (kind_line, kind_str) = ts.raw("kind")?;
    let kind = match kind_str {
        "token_pattern" => TaskKind::TokenPattern,
        "image_blob" => TaskKind::ImageBlob,
        "seq2seq_copy" => TaskKind::Seq2SeqCopy,
        other => {
            return Err(Error::ConfigParse {
                line: kind_line,
                msg: format!(
                    "field `kind`: expected token_pattern | image_blob | seq2seq_copy, got `{other}`"
                ),
            })
        }
    };
    let task = TaskSpec {
        kind,
        n_classes: ts.usize("classes")?,
        train_size: ts.usize("train")?,
        val_size: ts.usize("val")?,
        test_size: ts.usize("test")?,
        shift: ShiftParams {
            angle: ts.f64("angle")?,
            label_remap: ts.bool("remap")?,
            noise: ts.f64("noise")?,
        },
        redundancy_stress: ts.bool("stress")?,
        seed: ts.u64("seed")?,
    };

    let st = Section {
        name: "strategy",
        entries: doc.section("strategy")?,
    };
    let reduction = st.usize("reduction")?;
    let insertion = match st.opt("insertion") {
        None => Insertion::Standard,
        Some((line, v)) => parse_insertion(v).ok_or(Error::ConfigParse {
            line,
            msg: format!("field `insertion`: expected standard | single:N | multi:N, got `{v}`"),
        })?,
    };
    let (skind_line, skind) = st.raw("kind")?;
    let kind = match skind {
        "sherl" => {
            let aggregator = match st.opt("aggregator") {
                None => Aggregator::Mtsa,
                Some((line, v)) => {
                    parse_aggregator(v, st.opt("heads").and_then(|(_, h)| h.parse().ok()))
                        .ok_or(Error::ConfigParse {
                            line,
                            msg: format!("field `aggregator`: unknown value `{v}`"),
                        })?
                }
            };
            StrategyKind::Sherl { aggregator }
        }
        "linear_probe" => StrategyKind::LinearProbe,
        "full_ft" => StrategyKind::FullFt,
        other => {
            return Err(Error::ConfigParse {
                line: skind_line,
                msg: format!(
                    "field `kind`: expected sherl | linear_probe | full_ft, got `{other}`"
                ),
            })
        }
    };
    let strategy = Strategy {
        kind,
        insertion,
        reduction,
    };

    let tr = Section {
        name: "train",
        entries: doc.section("train")?,
    };
    let (warm_line, warm_str) = tr.raw("warmup")?;
    let warmup = match warm_str {
        "none" => Warmup::None,
        "linear" => Warmup::Linear,
        "cosine" => Warmup::Cosine,
        other => {
            return Err(Error::ConfigParse {
                line: warm_line,
                msg: format!("field `warmup`: expected none | linear | cosine, got `{other}`"),
            })
        }
    };
    let train = TrainConfig {
        learning_rate: tr.f64("learning_rate")?,
        epochs: tr.usize("epochs")?,
        batch_size: tr.usize("batch_size")?,
        warmup,
        adam_beta1: tr.f64("adam_beta1")?,
        adam_beta2: tr.f64("adam_beta2")?,
        weight_decay: tr.f64("weight_decay")?,
        seed: tr.u64("seed")?,
    };
    train.validate()?;

    let ablate = if let Ok(entries) = doc.section("ablate") {
        let ab = Section {
            name: "ablate",
            entries,
        };
        let mut strategies = Vec::new();
        if let Some((line, v)) = ab.opt("strategies") {
            for part in v.split(',') {
                let part = part.trim();
                strategies.push(parse_strategy_label(part, reduction, insertion).ok_or(
                    Error::ConfigParse {
                        line,
                        msg: format!("field `strategies`: unknown strategy `{part}`"),
                    },
                )?);
            }
        }
        let reductions = match ab.opt("reductions") {
            Some(_) => ab.usize_list("reductions")?,
            None => Vec::new(),
        };
        if strategies.is_empty() && reductions.is_empty() {
            return Err(Error::ConfigParse {
                line: 0,
                msg: "[ablate] needs `strategies`, `reductions`, or both".into(),
            });
        }
        Some(AblateOptions {
            strategies,
            reductions,
        })
    } else {
        None
    };

    // Cross-checks that need the whole file.
    if crate::harness::expected_family(task.kind) != backbone.family {
        return Err(Error::ConfigParse {
            line: kind_line,
            msg: format!(
                "task `{kind_str}` needs a {:?} backbone, [backbone].family is {:?}",
                crate::harness::expected_family(task.kind),
                backbone.family
            ),
        });
    }
    if backbone.family == Family::Cnn && strategy.insertion != Insertion::Standard {
        return Err(Error::ConfigParse {
            line: 0,
            msg: "CNN backbones support standard insertion only".into(),
        });
    }

    Ok(RunFile {
        backbone,
        task,
        strategy,
        train,
        weights_file,
        ablate,
    })
}

fn parse_insertion(v: &str) -> Option<Insertion> {
    if v == "standard" {
        return Some(Insertion::Standard);
    }
    if let Some(p) = v.strip_prefix("single:") {
        return Some(Insertion::SingleLayer {
            position: p.parse().ok()?,
        });
    }
    if let Some(p) = v.strip_prefix("multi:") {
        return Some(Insertion::MultiLayer {
            start: p.parse().ok()?,
        });
    }
    None
}

fn parse_aggregator(v: &str, heads: Option<usize>) -> Option<Aggregator> {
    match v {
        "mtsa" => Some(Aggregator::Mtsa),
        "linear_a" => Some(Aggregator::LinearA),
        "linear_a_r" => Some(Aggregator::LinearAR),
        "mhsa" => Some(Aggregator::Mhsa {
            heads: heads.unwrap_or(4),
        }),
        "max_pool" => Some(Aggregator::MaxPool),
        "ave_pool" => Some(Aggregator::AvePool),
        _ => None,
    }
}

/// `sherl:<aggregator>` / `linear_probe` / `full_ft` labels used in
/// ablation grids.
fn parse_strategy_label(label: &str, reduction: usize, insertion: Insertion) -> Option<Strategy> {
    match label {
        "linear_probe" => Some(Strategy::linear_probe()),
        "full_ft" => Some(Strategy::full_ft()),
        "sherl" => Some(Strategy {
            kind: StrategyKind::Sherl {
                aggregator: Aggregator::Mtsa,
            },
            insertion,
            reduction,
        }),
        _ => {
            let agg = label.strip_prefix("sherl:")?;
            Some(Strategy {
                kind: StrategyKind::Sherl {
                    aggregator: parse_aggregator(agg, Some(4))?,
                },
                insertion,
                reduction,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# minimal run
[backbone]
family = transformer
layers = 3
model_dim = 16
heads = 4
seq_len = 5
input_dim = 12
seed = 7

[task]
kind = token_pattern
classes = 3
train = 32
val = 8
test = 8
angle = 0.5
remap = false
noise = 0.05
stress = true
seed = 11

[strategy]
kind = sherl
aggregator = mtsa
reduction = 4

[train]
learning_rate = 3e-3
epochs = 1
batch_size = 8
warmup = none
adam_beta1 = 0.9
adam_beta2 = 0.999
weight_decay = 1e-2
seed = 1
";

    #[test]
    fn good_config_parses() {
        let rf = parse_run_file(GOOD).unwrap();
        assert_eq!(rf.backbone.n_layers, 3);
        assert_eq!(rf.task.n_classes, 3);
        assert_eq!(rf.strategy.reduction, 4);
        assert!(rf.ablate.is_none());
    }

    #[test]
    fn missing_field_is_named() {
        let broken = GOOD.replace("classes = 3\n", "");
        let err = parse_run_file(&broken).err().expect("must fail");
        assert!(err.to_string().contains("classes"), "{err}");
    }

    #[test]
    fn unknown_field_carries_line_number() {
        let broken = GOOD.replace("[train]", "[train]\nbogus = 1");
        let err = parse_run_file(&broken).err().expect("must fail");
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn bad_value_is_rejected_with_field() {
        let broken = GOOD.replace("warmup = none", "warmup = sometimes");
        let err = parse_run_file(&broken).err().expect("must fail");
        assert!(err.to_string().contains("warmup"), "{err}");
    }

    #[test]
    fn family_task_mismatch_is_caught() {
        let broken = GOOD.replace("kind = token_pattern", "kind = image_blob");
        assert!(parse_run_file(&broken).is_err());
    }

    #[test]
    fn ablate_section_parses_grids() {
        let cfg = format!(
            "{GOOD}\n[ablate]\nstrategies = sherl:mtsa, sherl:linear_a, linear_probe\nreductions = 16,8\n"
        );
        let rf = parse_run_file(&cfg).unwrap();
        let ab = rf.ablate.unwrap();
        assert_eq!(ab.strategies.len(), 3);
        assert_eq!(ab.reductions, vec![16, 8]);
    }
}
