//! JSON-lines dataset files.
//!
//! Line 1 is a header `{"dims": {"audio": .., "text": .., "visual": ..}, "classes": [..]}`;
//! every following line is one conversation:
//! `{"id", "num_parties", "utterances": [{"t", "speaker", "label", "audio", "text", "visual"}]}`
//! with `null` for an absent modality.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::model::{validate_conversation, Conversation, Dataset, Dims, Utterance};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: Dims,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    num_parties: usize,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    t: usize,
    speaker: usize,
    label: usize,
    audio: Option<Vec<f64>>,
    text: Option<Vec<f64>>,
    visual: Option<Vec<f64>>,
}

impl From<&Conversation> for ConversationRecord {
    fn from(c: &Conversation) -> Self {
        Self {
            id: c.id.clone(),
            num_parties: c.num_parties,
            utterances: c
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    t: u.turn,
                    speaker: u.speaker,
                    label: u.label,
                    audio: u.features[0].clone(),
                    text: u.features[1].clone(),
                    visual: u.features[2].clone(),
                })
                .collect(),
        }
    }
}

impl From<ConversationRecord> for Conversation {
    fn from(r: ConversationRecord) -> Self {
        Self {
            id: r.id,
            num_parties: r.num_parties,
            utterances: r
                .utterances
                .into_iter()
                .map(|u| Utterance {
                    turn: u.t,
                    speaker: u.speaker,
                    label: u.label,
                    features: [u.audio, u.text, u.visual],
                })
                .collect(),
        }
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        dims: dataset.dims,
        classes: dataset.classes.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for conv in &dataset.conversations {
        serde_json::to_writer(&mut w, &ConversationRecord::from(conv))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let reader = BufReader::new(r);
    let mut header: Option<Header> = None;
    let mut conversations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad header: {e}"),
                })?;
                if h.classes.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "header lists no classes".into(),
                    });
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: ConversationRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    })?;
                let conv = Conversation::from(rec);
                validate_conversation(&conv, &h.dims.as_array(), h.classes.len()).map_err(
                    |e| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    },
                )?;
                conversations.push(conv);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let dataset = Dataset {
        dims: header.dims,
        classes: header.classes,
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"dims":{"audio":2,"text":1,"visual":1},"classes":["neutral","happy"]}
{"id":"a","num_parties":2,"utterances":[{"t":0,"speaker":0,"label":0,"audio":[0.5,1.0],"text":[2.0],"visual":null},{"t":1,"speaker":1,"label":1,"audio":null,"text":[-1.0],"visual":[3.0]},{"t":2,"speaker":0,"label":1,"audio":[0.0,0.0],"text":null,"visual":null}]}
{"id":"b","num_parties":1,"utterances":[{"t":0,"speaker":0,"label":0,"audio":[1,2],"text":[3],"visual":[4]},{"t":1,"speaker":0,"label":0,"audio":[1,2],"text":[3],"visual":[4]},{"t":2,"speaker":0,"label":1,"audio":[1,2],"text":[3],"visual":[4]},{"t":3,"speaker":0,"label":1,"audio":[1,2],"text":[3],"visual":[4]},{"t":4,"speaker":0,"label":0,"audio":[1,2],"text":null,"visual":[4]}]}
"#;

    #[test]
    fn fixture_parses_with_known_turn_counts() {
        let d = read_dataset(FIXTURE.as_bytes()).unwrap();
        let lens: Vec<usize> = d.conversations.iter().map(Conversation::len).collect();
        assert_eq!(lens, vec![3, 5]);
        assert_eq!(d.conversations[0].mask().rows[1], [false, true, true]);
        // 5 absent slots out of 24
        assert!((d.missing_rate() - 5.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn round_trip_is_identity() {
        let d = read_dataset(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn all_null_row_is_rejected_with_line_number() {
        let bad = FIXTURE.replace(
            r#""audio":[0.0,0.0],"text":null"#,
            r#""audio":null,"text":null"#,
        );
        match read_dataset(bad.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("every modality is absent"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let bad = format!("{FIXTURE}{{not json\n");
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn dim_inconsistency_is_rejected() {
        let bad = FIXTURE.replace("[0.5,1.0]", "[0.5]");
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }
}
