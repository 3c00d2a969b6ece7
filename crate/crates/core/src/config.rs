//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Keys not present keep their desk-preset value; unknown or
//! repeated keys are errors.

use crate::audio_io::ExcerptSpec;
use crate::error::{Error, Result};
use crate::model::{format_placements, parse_placements};
use crate::training::TrainConfig;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Every recognized key, in serialization order.
pub const KEYS: [&str; 31] = [
    "seed",
    "iterations",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "weight_decay",
    "checkpoint_every",
    "mock_teacher",
    "excerpt_duration_s",
    "target_lufs",
    "encoder_strides",
    "encoder_base_channels",
    "latent_dim",
    "decoder_rates",
    "decoder_channels",
    "film_placements",
    "film_hidden",
    "semantic_size",
    "n_acoustic",
    "acoustic_size",
    "quantizer_dropout",
    "teacher_dim",
    "disc_channels",
    "weight_mel",
    "weight_fm",
    "weight_adv",
    "weight_cb",
    "weight_commit",
    "weight_sem",
    "preset",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits text into `(line_number, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(line, format!("line {}: expected `key = value`", i + 1)));
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Parses a config file body. A `preset = full` line selects the
    /// full-scale starting point; otherwise missing keys take desk values.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let mut seen = BTreeSet::new();
        for (line, k, _) in &entries {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k.clone(), format!("unknown key on line {line}")));
            }
            if !seen.insert(k.clone()) {
                return Err(Error::config(k.clone(), format!("repeated on line {line}")));
            }
        }
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "preset").map(|(_, _, v)| v.as_str()) {
            None | Some("desk") => TrainConfig::desk(),
            Some("full") => TrainConfig::full(),
            Some(other) => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        for (_, k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(Error::io(path.as_ref()))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {}
            "seed" => self.seed = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "mock_teacher" => self.mock_teacher = parse(key, v)?,
            "excerpt_duration_s" => self.excerpt = ExcerptSpec { duration_s: parse(key, v)?, ..self.excerpt },
            "target_lufs" => self.excerpt = ExcerptSpec { target_lufs: parse(key, v)?, ..self.excerpt },
            "encoder_strides" => m.encoder.strides = parse_list(key, v)?,
            "encoder_base_channels" => m.encoder.base_channels = parse(key, v)?,
            "latent_dim" => {
                m.encoder.latent_dim = parse(key, v)?;
                m.rvq.latent_dim = m.encoder.latent_dim;
            }
            "decoder_rates" => m.decoder.rates = parse_list(key, v)?,
            "decoder_channels" => m.decoder.channels = parse(key, v)?,
            "film_placements" => {
                m.decoder.film_placements = parse_placements(v).map_err(|e| Error::config(key, e.to_string()))?
            }
            "film_hidden" => m.decoder.film_hidden = parse(key, v)?,
            "semantic_size" => m.rvq.semantic_size = parse(key, v)?,
            "n_acoustic" => m.rvq.n_acoustic = parse(key, v)?,
            "acoustic_size" => m.rvq.acoustic_size = parse(key, v)?,
            "quantizer_dropout" => m.rvq.quantizer_dropout = parse(key, v)?,
            "teacher_dim" => m.teacher_dim = parse(key, v)?,
            "disc_channels" => self.disc_channels = parse_list(key, v)?,
            "weight_mel" => self.weights.mel = parse(key, v)?,
            "weight_fm" => self.weights.feature_match = parse(key, v)?,
            "weight_adv" => self.weights.adversarial = parse(key, v)?,
            "weight_cb" => self.weights.codebook = parse(key, v)?,
            "weight_commit" => self.weights.commitment = parse(key, v)?,
            "weight_sem" => self.weights.semantic = parse(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "preset" => "custom".into(),
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "mock_teacher" => self.mock_teacher.to_string(),
            "excerpt_duration_s" => self.excerpt.duration_s.to_string(),
            "target_lufs" => self.excerpt.target_lufs.to_string(),
            "encoder_strides" => list(&m.encoder.strides),
            "encoder_base_channels" => m.encoder.base_channels.to_string(),
            "latent_dim" => m.encoder.latent_dim.to_string(),
            "decoder_rates" => list(&m.decoder.rates),
            "decoder_channels" => m.decoder.channels.to_string(),
            "film_placements" => format_placements(&m.decoder.film_placements),
            "film_hidden" => m.decoder.film_hidden.to_string(),
            "semantic_size" => m.rvq.semantic_size.to_string(),
            "n_acoustic" => m.rvq.n_acoustic.to_string(),
            "acoustic_size" => m.rvq.acoustic_size.to_string(),
            "quantizer_dropout" => m.rvq.quantizer_dropout.to_string(),
            "teacher_dim" => m.teacher_dim.to_string(),
            "disc_channels" => list(&self.disc_channels),
            "weight_mel" => self.weights.mel.to_string(),
            "weight_fm" => self.weights.feature_match.to_string(),
            "weight_adv" => self.weights.adversarial.to_string(),
            "weight_cb" => self.weights.codebook.to_string(),
            "weight_commit" => self.weights.commitment.to_string(),
            "weight_sem" => self.weights.semantic.to_string(),
            _ => unreachable!("serialized keys come from KEYS"),
        }
    }

    /// Serializes every field; `from_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter(|&&k| k != "preset")
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }
}
