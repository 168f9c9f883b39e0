use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{tokenize, Example, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tsv,
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown data format {other:?}"))),
        }
    }
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" => Some(Self::Tsv),
            "jsonl" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    label: String,
    #[serde(default)]
    uid: Option<String>,
}

/// Read a labelled dataset for `task`, preserving row order.
///
/// TSV rows are `text_a<TAB>text_b<TAB>label`, with an optional fourth `uid`
/// column. JSONL rows carry `text_a`, `text_b`, `label` and optionally `uid`.
/// Rows without a uid get `<task>-<row>`.
pub fn load_dataset(path: &Path, format: DataFormat, task: &TaskSpec) -> Result<Vec<Example>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let rows = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    for (row, (line_no, line)) in rows.enumerate() {
        let malformed = |reason: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no + 1,
            reason,
        };
        let (text_a, text_b, label, uid) = match format {
            DataFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if !(3..=4).contains(&cols.len()) {
                    return Err(malformed(format!("expected 3 or 4 columns, found {}", cols.len())));
                }
                (
                    cols[0].to_owned(),
                    Some(cols[1].to_owned()),
                    cols[2].trim().to_owned(),
                    cols.get(3).map(|u| u.trim().to_owned()),
                )
            }
            DataFormat::Jsonl => {
                let r: JsonRow = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                (r.text_a, r.text_b, r.label, r.uid)
            }
        };
        let example = Example {
            uid: uid.unwrap_or_else(|| format!("{}-{row}", task.task_id)),
            task_id: task.task_id.clone(),
            text_a: tokenize(&text_a),
            text_b: text_b.map(|b| tokenize(&b)).filter(|b| !b.is_empty()),
            label,
        };
        example.validate(task)?;
        out.push(example);
    }
    if out.is_empty() {
        return Err(Error::NoExamples(path.to_path_buf()));
    }
    let mut uids: Vec<&str> = out.iter().map(|e| e.uid.as_str()).collect();
    uids.sort_unstable();
    if let Some(w) = uids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidExample {
            uid: w[0].to_owned(),
            reason: "duplicate uid".into(),
        });
    }
    Ok(out)
}

/// Write examples in a form [`load_dataset`] reads back uid-for-uid.
pub fn write_dataset(path: &Path, format: DataFormat, examples: &[Example]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let text_b = ex.text_b.as_ref().map(|b| b.join(" "));
        match format {
            DataFormat::Tsv => writeln!(
                file,
                "{}\t{}\t{}\t{}",
                ex.text_a.join(" "),
                text_b.unwrap_or_default(),
                ex.label,
                ex.uid
            )?,
            DataFormat::Jsonl => {
                let row = JsonRow {
                    text_a: ex.text_a.join(" "),
                    text_b,
                    label: ex.label.clone(),
                    uid: Some(ex.uid.clone()),
                };
                writeln!(file, "{}", serde_json::to_string(&row)?)?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Verbalizer;
    use crate::templates::TemplateSettings;
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec {
            task_id: "sst".into(),
            name: "sst".into(),
            group_id: "sentiment".into(),
            label_set: vec!["0".into(), "1".into()],
            verbalizer: Verbalizer::new(vec![vec![3], vec![4]]),
            template: TemplateSettings::default(),
        }
    }

    #[test]
    fn loads_tsv_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "a good film\t\t1\nbad plot\t\t0\nfine .\tyes\t1\n").unwrap();
        let rows = load_dataset(&path, DataFormat::Tsv, &task()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].text_a, vec!["a", "good", "film"]);
        assert_eq!(rows[0].text_b, None);
        assert_eq!(rows[1].uid, "sst-1");
        assert_eq!(rows[2].text_b.as_deref(), Some(&["yes".to_owned()][..]));
    }

    #[test]
    fn many_rows_are_all_returned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let body: String = (0..6920).map(|i| format!("w{i} x\t\t{}\n", i % 2)).collect();
        fs::write(&path, body).unwrap();
        assert_eq!(load_dataset(&path, DataFormat::Tsv, &task()).unwrap().len(), 6920);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "").unwrap();
        let err = load_dataset(&path, DataFormat::Tsv, &task()).unwrap_err();
        assert!(err.to_string().contains("no examples"));
    }

    #[test]
    fn unknown_label_names_uid_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"text_a\": \"hm\", \"label\": \"7\", \"uid\": \"row-x\"}\n").unwrap();
        let err = load_dataset(&path, DataFormat::Jsonl, &task()).unwrap_err().to_string();
        assert!(err.contains("row-x") && err.contains("\"7\""), "{err}");
    }

    fn arb_example() -> impl Strategy<Value = (Vec<String>, Option<Vec<String>>, bool)> {
        let word = "[a-z]{1,6}";
        (
            prop::collection::vec(word, 1..6),
            prop::option::of(prop::collection::vec(word, 1..4)),
            any::<bool>(),
        )
    }

    proptest! {
        #[test]
        fn write_then_load_round_trips(rows in prop::collection::vec(arb_example(), 1..20), jsonl in any::<bool>()) {
            let examples: Vec<Example> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (a, b, l))| Example {
                    uid: format!("u-{i}"),
                    task_id: "sst".into(),
                    text_a: a,
                    text_b: b,
                    label: if l { "1" } else { "0" }.into(),
                })
                .collect();
            let format = if jsonl { DataFormat::Jsonl } else { DataFormat::Tsv };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt");
            write_dataset(&path, format, &examples).unwrap();
            let back = load_dataset(&path, format, &task()).unwrap();
            prop_assert_eq!(back, examples);
        }
    }
}
