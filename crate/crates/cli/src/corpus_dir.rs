//! Corpus directories: `<root>/<speaker>/<split>/<id>.vcf` plus
//! `manifest.json` listing speakers, their group labels and utterance ids.

use std::fs;
use std::path::Path;

use mdvc_core::corpus::{Corpus, CorpusSpec, FeatureSequence, SpeakerSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::vcf;

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 2] = ["train", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rendering {
    pub mixing: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSpeaker {
    pub name: String,
    pub group: String,
    pub train: Vec<String>,
    /// Evaluation ids; equal ids across speakers are parallel utterances.
    pub eval: Vec<String>,
    /// Synthetic rendering parameters; absent for imported features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendering: Option<Rendering>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<CorpusSpec>,
    pub speakers: Vec<ManifestSpeaker>,
}

pub fn manifest_of(corpus: &Corpus, generated: Option<CorpusSpec>) -> Manifest {
    let ids = |v: &[FeatureSequence]| v.iter().map(|u| u.id.clone()).collect();
    Manifest {
        generated,
        speakers: corpus
            .speakers
            .iter()
            .enumerate()
            .map(|(s, spec)| ManifestSpeaker {
                name: spec.name.clone(),
                group: spec.group.clone(),
                train: ids(&corpus.train[s]),
                eval: ids(&corpus.eval[s]),
                rendering: Some(Rendering {
                    mixing: spec.mixing.clone(),
                    bias: spec.bias.clone(),
                    noise: spec.noise,
                }),
            })
            .collect(),
    }
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && name.chars().all(|c| !c.is_control());
    if ok {
        Ok(())
    } else {
        Err(CliError::Format(format!("{kind} name {name:?} is not usable as a file name")))
    }
}

pub fn write_corpus(corpus: &Corpus, generated: Option<CorpusSpec>, root: &Path) -> Result<()> {
    corpus.validate()?;
    let manifest = manifest_of(corpus, generated);
    for (s, spk) in manifest.speakers.iter().enumerate() {
        check_name("speaker", &spk.name)?;
        for (split, utts) in SPLITS.iter().zip([&corpus.train[s], &corpus.eval[s]]) {
            let dir = root.join(&spk.name).join(split);
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            for u in utts {
                check_name("utterance", &u.id)?;
                vcf::write_features(u, &dir.join(format!("{}.vcf", u.id)))?;
            }
        }
    }
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn read_corpus(root: &Path) -> Result<Corpus> {
    let manifest = read_manifest(root)?;
    let mut corpus = Corpus {
        speakers: Vec::new(),
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (s, spk) in manifest.speakers.iter().enumerate() {
        check_name("speaker", &spk.name)?;
        let mut spec = SpeakerSpec::identity(spk.name.clone(), spk.group.clone());
        if let Some(r) = &spk.rendering {
            spec.mixing = r.mixing.clone();
            spec.bias = r.bias.clone();
            spec.noise = r.noise;
        }
        corpus.speakers.push(spec);
        for (split, ids) in SPLITS.iter().zip([&spk.train, &spk.eval]) {
            let mut utts = Vec::with_capacity(ids.len());
            for id in ids {
                check_name("utterance", id)?;
                utts.push(vcf::read_features(&root.join(&spk.name).join(split).join(format!("{id}.vcf")), s)?);
            }
            if *split == "train" {
                corpus.train.push(utts);
            } else {
                corpus.eval.push(utts);
            }
        }
    }
    corpus.validate()?;
    Ok(corpus)
}
