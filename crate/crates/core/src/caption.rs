//! Captions used as text-space alignment targets.
//!
//! The default provider builds `"an image of {label}"` from the class name.
//! Captions produced offline by a captioning model are ingested from a CSV
//! with header `stimulus_id,caption`. For layout-oriented captions the
//! instruction given to the captioning model was:
//!
//! ```text
//! Write a description of the image layout.
//! EXAMPLE OUTPUT: [object] is in the top left of the image, facing right.
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Caption, CaptionSource};

pub const LABEL_PLACEHOLDER: &str = "{label}";
pub const DEFAULT_TEMPLATE: &str = "an image of {label}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    #[default]
    LabelTemplate,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionProviderConfig {
    #[serde(default)]
    pub mode: CaptionMode,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub external_path: Option<PathBuf>,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}

impl Default for CaptionProviderConfig {
    fn default() -> Self {
        CaptionProviderConfig {
            mode: CaptionMode::LabelTemplate,
            template: default_template(),
            external_path: None,
        }
    }
}

impl CaptionProviderConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CaptionMode::LabelTemplate => {
                let n = self.template.matches(LABEL_PLACEHOLDER).count();
                if n != 1 {
                    return Err(Error::Config(format!(
                        "caption template must contain exactly one {LABEL_PLACEHOLDER}, found {n}"
                    )));
                }
            }
            CaptionMode::ExternalFile => {
                if self.external_path.is_none() {
                    return Err(Error::Config("external caption mode needs a caption file path".into()));
                }
            }
        }
        Ok(())
    }
}

/// What a caption is requested for.
#[derive(Debug, Clone, Copy)]
pub struct CaptionQuery<'a> {
    pub stimulus_id: Option<&'a str>,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub enum CaptionProvider {
    LabelTemplate { template: String, class_names: Vec<String> },
    External { captions: BTreeMap<String, String> },
}

impl CaptionProvider {
    pub fn from_config(config: &CaptionProviderConfig, class_names: &[String]) -> Result<Self> {
        config.validate()?;
        Ok(match config.mode {
            CaptionMode::LabelTemplate => CaptionProvider::LabelTemplate {
                template: config.template.clone(),
                class_names: class_names.to_vec(),
            },
            CaptionMode::ExternalFile => CaptionProvider::External {
                captions: load_external_captions(config.external_path.as_deref().expect("validated"))?,
            },
        })
    }

    pub fn label_template(class_names: &[String]) -> Self {
        CaptionProvider::LabelTemplate {
            template: DEFAULT_TEMPLATE.to_string(),
            class_names: class_names.to_vec(),
        }
    }

    pub fn caption_for(&self, query: CaptionQuery<'_>) -> Result<Caption> {
        match self {
            CaptionProvider::LabelTemplate { template, class_names } => {
                let label = class_names
                    .get(query.class_id)
                    .ok_or_else(|| Error::Dataset(format!("class {} has no class name", query.class_id)))?;
                Ok(Caption {
                    text: template.replacen(LABEL_PLACEHOLDER, label, 1),
                    source: CaptionSource::LabelTemplate,
                    stimulus_id: query.stimulus_id.map(str::to_string),
                    class_id: Some(query.class_id),
                })
            }
            CaptionProvider::External { captions } => {
                let id = query
                    .stimulus_id
                    .ok_or_else(|| Error::Dataset("external captions are keyed by stimulus id".into()))?;
                let text = captions
                    .get(id)
                    .ok_or_else(|| Error::Dataset(format!("no external caption for stimulus {id}")))?;
                Ok(Caption {
                    text: text.clone(),
                    source: CaptionSource::ExternalFile,
                    stimulus_id: Some(id.to_string()),
                    class_id: Some(query.class_id),
                })
            }
        }
    }
}

/// Reads a `stimulus_id,caption` CSV.
pub fn load_external_captions(path: &Path) -> Result<BTreeMap<String, String>> {
    let what = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::parse(&what, e),
        })?;
    let headers = reader.headers().map_err(|e| Error::parse(&what, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["stimulus_id", "caption"] {
        return Err(Error::parse(&what, "line 1: header must be stimulus_id,caption"));
    }
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(&what, format!("line {line}: {e}")))?;
        if record.len() != 2 {
            return Err(Error::parse(
                &what,
                format!("line {line}: expected 2 fields, found {}", record.len()),
            ));
        }
        let (id, caption) = (record[0].to_string(), record[1].to_string());
        if id.is_empty() {
            return Err(Error::parse(&what, format!("line {line}: empty stimulus_id")));
        }
        if caption.is_empty() {
            return Err(Error::parse(&what, format!("line {line}: empty caption for {id}")));
        }
        if out.insert(id.clone(), caption).is_some() {
            return Err(Error::parse(&what, format!("line {line}: duplicate stimulus_id {id}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn names() -> Vec<String> {
        vec!["electric locomotive".into(), "panda".into(), "n02106662_German_shepherd,dog".into()]
    }

    #[test]
    fn label_template_substitution_is_verbatim() {
        let p = CaptionProvider::label_template(&names());
        let q = |c| CaptionQuery {
            stimulus_id: None,
            class_id: c,
        };
        assert_eq!(p.caption_for(q(0)).unwrap().text, "an image of electric locomotive");
        assert_eq!(p.caption_for(q(1)).unwrap().text, "an image of panda");
        assert_eq!(p.caption_for(q(2)).unwrap().text, "an image of n02106662_German_shepherd,dog");
        assert!(p.caption_for(q(3)).is_err());
    }

    #[test]
    fn template_needs_one_placeholder() {
        let mut c = CaptionProviderConfig::default();
        assert!(c.validate().is_ok());
        c.template = "no label".into();
        assert!(c.validate().is_err());
        c.template = "{label} and {label}".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn external_captions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        fs::write(
            &path,
            "stimulus_id,caption\ns17,a red chair on grass\ns18,\"a dog, sitting\"\ns19,x\n",
        )
        .unwrap();
        let map = load_external_captions(&path).unwrap();
        assert_eq!(map.len(), 3);
        let p = CaptionProvider::External { captions: map };
        let cap = p
            .caption_for(CaptionQuery {
                stimulus_id: Some("s17"),
                class_id: 0,
            })
            .unwrap();
        assert_eq!(cap.text, "a red chair on grass");
        assert_eq!(cap.source, CaptionSource::ExternalFile);
        let err = p
            .caption_for(CaptionQuery {
                stimulus_id: Some("s99"),
                class_id: 0,
            })
            .unwrap_err();
        assert!(err.to_string().contains("s99"));

        fs::write(&path, "stimulus_id,caption\ns1,a\ns1,b\n").unwrap();
        let err = load_external_captions(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("s1"), "{err}");

        fs::write(&path, "stimulus_id,caption\ns1,\n").unwrap();
        assert!(load_external_captions(&path).unwrap_err().to_string().contains("empty caption"));

        fs::write(&path, "stimulus_id,caption\ns1,a\ns2,b,c\n").unwrap();
        assert!(load_external_captions(&path).unwrap_err().to_string().contains("line 3"));

        assert!(matches!(
            load_external_captions(&dir.path().join("none.csv")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn template_output_is_prefix_plus_label(label in "[^{}]{1,30}") {
            let p = CaptionProvider::label_template(&[label.clone()]);
            let text = p.caption_for(CaptionQuery { stimulus_id: None, class_id: 0 }).unwrap().text;
            prop_assert!(text.starts_with("an image of "));
            prop_assert!(text.ends_with(&label));
            prop_assert_eq!(text.len(), "an image of ".len() + label.len());
            let again = p.caption_for(CaptionQuery { stimulus_id: None, class_id: 0 }).unwrap().text;
            prop_assert_eq!(text, again);
        }
    }
}
