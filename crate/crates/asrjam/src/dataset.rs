//! Dataset manifests, directory ingestion, and the synthetic spoken-token
//! corpus used for desk-scale experiments.
//!
//! A manifest is JSON-lines, one record per utterance:
//! `{"audio_path": ..., "transcript": ..., "sample_rate": ...}` plus
//! optional split and resampling provenance.

use crate::alphabet::{normalize_text, Transcript};
use crate::audio::{read_wav, resample, write_wav, Waveform, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::component_rng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: PathBuf,
    pub transcript: String,
    pub sample_rate: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Original rate when the audio was resampled at ingest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resampled_from: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::config(format!("cannot open manifest {}: {e}", path.display()))
        })?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        if records.is_empty() {
            return Err(Error::config(format!(
                "manifest {} has zero records",
                path.display()
            )));
        }
        Ok(DatasetManifest { records })
    }

    /// Load every utterance into memory at the canonical sample rate.
    pub fn load_audio(&self) -> Result<Vec<(Waveform, Transcript)>> {
        self.records
            .iter()
            .map(|r| {
                let w = read_wav(&r.audio_path)?;
                let w = resample(&w, CANONICAL_SAMPLE_RATE)?;
                let t = Transcript::new(r.transcript.clone())?;
                Ok((w, t))
            })
            .collect()
    }
}

/// Supported source directory layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestLayout {
    /// `*.wav` files with sibling `*.txt` transcripts.
    Flat,
    /// speaker/chapter directories with `{spk}-{chap}.trans.txt` listings.
    Librispeech,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Walk a source directory, pair audio with transcripts, normalize text,
/// and produce a manifest. Unreadable or unpairable files are skipped with
/// a warning; an empty result is an error.
pub fn ingest(source: &Path, layout: IngestLayout, split: Option<&str>) -> Result<IngestReport> {
    if !source.is_dir() {
        return Err(Error::config(format!(
            "source directory {} does not exist",
            source.display()
        )));
    }
    let mut report = IngestReport::default();
    match layout {
        IngestLayout::Flat => ingest_flat(source, split, &mut report)?,
        IngestLayout::Librispeech => ingest_librispeech(source, split, &mut report)?,
    }
    if report.manifest.is_empty() {
        return Err(Error::config(format!(
            "ingest produced zero records from {} ({} skipped)",
            source.display(),
            report.skipped
        )));
    }
    Ok(report)
}

fn add_record(
    report: &mut IngestReport,
    audio_path: PathBuf,
    raw_text: &str,
    split: Option<&str>,
) {
    let text = normalize_text(raw_text);
    if text.is_empty() {
        report.skipped += 1;
        report
            .warnings
            .push(format!("{}: empty transcript after normalization", audio_path.display()));
        return;
    }
    match read_wav(&audio_path) {
        Ok(w) => {
            report.manifest.records.push(ManifestRecord {
                audio_path,
                transcript: text,
                sample_rate: w.sample_rate,
                split: split.map(|s| s.to_string()),
                resampled_from: None,
            });
        }
        Err(e) => {
            report.skipped += 1;
            report
                .warnings
                .push(format!("{}: {e}", audio_path.display()));
        }
    }
}

fn ingest_flat(source: &Path, split: Option<&str>, report: &mut IngestReport) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(source)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let txt = path.with_extension("txt");
        match std::fs::read_to_string(&txt) {
            Ok(text) => add_record(report, path, &text, split),
            Err(_) => {
                report.skipped += 1;
                report
                    .warnings
                    .push(format!("{}: missing transcript {}", path.display(), txt.display()));
            }
        }
    }
    Ok(())
}

fn ingest_librispeech(source: &Path, split: Option<&str>, report: &mut IngestReport) -> Result<()> {
    // speaker/chapter/{spk}-{chap}.trans.txt with lines "UTTID TEXT"
    let mut speakers: Vec<PathBuf> = std::fs::read_dir(source)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    for speaker in speakers {
        let mut chapters: Vec<PathBuf> = std::fs::read_dir(&speaker)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        chapters.sort();
        for chapter in chapters {
            let mut trans_files: Vec<PathBuf> = std::fs::read_dir(&chapter)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(".trans.txt"))
                })
                .collect();
            trans_files.sort();
            for trans in trans_files {
                let content = match std::fs::read_to_string(&trans) {
                    Ok(c) => c,
                    Err(e) => {
                        report.skipped += 1;
                        report.warnings.push(format!("{}: {e}", trans.display()));
                        continue;
                    }
                };
                for line in content.lines() {
                    let Some((utt_id, text)) = line.split_once(' ') else {
                        continue;
                    };
                    let audio = chapter.join(format!("{utt_id}.wav"));
                    if audio.exists() {
                        add_record(report, audio, text, split);
                    } else {
                        report.skipped += 1;
                        report
                            .warnings
                            .push(format!("{}: audio file not found", audio.display()));
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic spoken-token corpus
// ---------------------------------------------------------------------------

/// Vocabulary of the synthetic corpus: common short words plus a tail of
/// longer ones, sampled with a Zipf-like bias so frequency statistics
/// resemble natural text.
pub const VOCABULARY: [&str; 48] = [
    "the", "a", "of", "to", "and", "in", "is", "it", "you", "that", "he", "was", "for", "on",
    "are", "with", "as", "his", "they", "be", "at", "one", "have", "this", "from", "or", "had",
    "by", "word", "but", "what", "some", "we", "can", "out", "other", "were", "all", "there",
    "when", "remembered", "different", "important", "together", "children", "mountain",
    "question", "complete",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub words_per_utterance: (usize, usize),
    pub seed: u64,
    /// Background noise amplitude relative to the utterance amplitude.
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_utterances: 500,
            dev_utterances: 40,
            test_utterances: 120,
            words_per_utterance: (8, 11),
            seed: 2024,
            noise_level: 0.006,
        }
    }
}

/// Base duration of one character sound in samples (about 110 ms).
const CHAR_SAMPLES: usize = 1_760;
/// Duration of the inter-word gap in samples (about 95 ms).
const GAP_SAMPLES: usize = 1_520;

/// Render one character as a two-formant tone with a raised-cosine envelope.
/// Each character has a fixed formant pair, so words are deterministic
/// acoustic patterns; phase and speaking rate vary per utterance.
fn render_char(
    out: &mut Vec<f64>,
    label: usize,
    rate_scale: f64,
    phase1: f64,
    phase2: f64,
) {
    let n = (CHAR_SAMPLES as f64 * rate_scale).round() as usize;
    let f1 = 280.0 + 52.0 * label as f64;
    let f2 = 1_900.0 + 61.0 * label as f64;
    let sr = CANONICAL_SAMPLE_RATE as f64;
    let ramp = (n / 8).max(1);
    for i in 0..n {
        let t = i as f64 / sr;
        let env_in = (i as f64 / ramp as f64).min(1.0);
        let env_out = ((n - 1 - i) as f64 / ramp as f64).min(1.0);
        let env = env_in.min(env_out);
        let v = 0.62 * (2.0 * std::f64::consts::PI * f1 * t + phase1).sin()
            + 0.38 * (2.0 * std::f64::consts::PI * f2 * t + phase2).sin();
        out.push(env * v);
    }
}

/// Synthesize one utterance for a word sequence. Deterministic per RNG
/// state: amplitude, speaking rate, phases, and background noise all come
/// from the provided stream.
pub fn synthesize_utterance(
    words: &[&str],
    noise_level: f64,
    rng: &mut ChaCha12Rng,
) -> (Waveform, Transcript) {
    let alpha = crate::alphabet::Alphabet;
    let amplitude = rng.gen_range(0.30..0.85);
    let rate_scale = rng.gen_range(0.92..1.10);
    let noise = rng.gen_range(0.5..1.0);
    let mut samples = Vec::new();
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 {
            let gap = (GAP_SAMPLES as f64 * rate_scale).round() as usize;
            samples.extend(std::iter::repeat(0.0).take(gap));
        }
        for c in word.chars() {
            let label = alpha.char_to_index(c).expect("vocabulary is alphabet-closed");
            let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
            render_char(&mut samples, label, rate_scale, p1, p2);
        }
    }
    // lead-in / lead-out so the first word is not clipped by windowing
    let pad = (GAP_SAMPLES as f64 * 0.5) as usize;
    let mut padded = vec![0.0; pad];
    padded.extend(samples);
    padded.extend(std::iter::repeat(0.0).take(pad));
    let noise_amp = noise_level * noise;
    for s in padded.iter_mut() {
        *s = amplitude * (*s + rng.gen_range(-noise_amp..noise_amp));
        *s = s.clamp(-1.0, 1.0);
    }
    let text = words.join(" ");
    (
        Waveform {
            samples: padded,
            sample_rate: CANONICAL_SAMPLE_RATE,
        },
        Transcript::new(text).expect("vocabulary is alphabet-closed"),
    )
}

/// Draw a word sequence with a Zipf-like bias over the vocabulary.
pub fn sample_words<'a>(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Vec<&'a str> {
    let weights: Vec<f64> = (0..VOCABULARY.len())
        .map(|i| 1.0 / (i as f64 + 2.0))
        .collect();
    let total: f64 = weights.iter().sum();
    let n = rng.gen_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
    (0..n)
        .map(|_| {
            let mut u = rng.gen_range(0.0..total);
            for (w, &wt) in VOCABULARY.iter().zip(&weights) {
                if u < wt {
                    return *w;
                }
                u -= wt;
            }
            VOCABULARY[0]
        })
        .collect()
}

/// Generate an in-memory corpus split.
pub fn generate_split(
    cfg: &SynthConfig,
    split: &str,
    count: usize,
) -> Vec<(Waveform, Transcript)> {
    let mut rng = component_rng(cfg.seed, &format!("synth-{split}"));
    (0..count)
        .map(|_| {
            let words = sample_words(cfg, &mut rng);
            synthesize_utterance(&words, cfg.noise_level, &mut rng)
        })
        .collect()
}

/// Materialize the synthetic corpus under `dir` with one manifest per split.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir)?;
    let splits = [
        ("train", cfg.train_utterances),
        ("dev", cfg.dev_utterances),
        ("test", cfg.test_utterances),
    ];
    let mut manifest_paths = Vec::new();
    for (split, count) in splits {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir)?;
        let mut manifest = DatasetManifest::default();
        for (i, (w, t)) in generate_split(cfg, split, count).into_iter().enumerate() {
            let audio_path = split_dir.join(format!("utt{i:04}.wav"));
            write_wav(&audio_path, &w)?;
            manifest.records.push(ManifestRecord {
                audio_path,
                transcript: t.as_str().to_string(),
                sample_rate: CANONICAL_SAMPLE_RATE,
                split: Some(split.to_string()),
                resampled_from: None,
            });
        }
        let path = dir.join(format!("{split}.jsonl"));
        manifest.save(&path)?;
        manifest_paths.push(path);
    }
    Ok([
        manifest_paths[0].clone(),
        manifest_paths[1].clone(),
        manifest_paths[2].clone(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_utterances_are_deterministic_and_bounded() {
        let cfg = SynthConfig::default();
        let a = generate_split(&cfg, "train", 3);
        let b = generate_split(&cfg, "train", 3);
        for ((wa, ta), (wb, tb)) in a.iter().zip(&b) {
            assert_eq!(wa.samples, wb.samples);
            assert_eq!(ta, tb);
            assert!(wa.peak() <= 1.0);
            assert!(wa.duration() > 2.5, "utterances must outlast the context");
        }
    }

    #[test]
    fn splits_are_distinct() {
        let cfg = SynthConfig::default();
        let train = generate_split(&cfg, "train", 2);
        let test = generate_split(&cfg, "test", 2);
        assert_ne!(train[0].0.samples, test[0].0.samples);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let manifest = DatasetManifest {
            records: vec![ManifestRecord {
                audio_path: PathBuf::from("/tmp/a.wav"),
                transcript: "hello there".into(),
                sample_rate: 16_000,
                split: Some("train".into()),
                resampled_from: None,
            }],
        };
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.records[0].transcript, "hello there");
    }

    #[test]
    fn ingest_flat_fixture() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [("a", "Hello!"), ("b", "WORLD one"), ("c", "it's fine")] {
            let w = Waveform::new(vec![0.1; 1600], 16_000).unwrap();
            write_wav(&dir.path().join(format!("{name}.wav")), &w).unwrap();
            std::fs::write(dir.path().join(format!("{name}.txt")), text).unwrap();
        }
        // one orphan wav without transcript
        write_wav(
            &dir.path().join("orphan.wav"),
            &Waveform::new(vec![0.1; 160], 16_000).unwrap(),
        )
        .unwrap();
        let report = ingest(dir.path(), IngestLayout::Flat, Some("train")).unwrap();
        assert_eq!(report.manifest.len(), 3);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.manifest.records[0].transcript, "hello");
        assert_eq!(report.manifest.records[2].transcript, "it's fine");
    }

    #[test]
    fn ingest_librispeech_fixture() {
        // 2 speakers x 1 chapter x 2 utterances
        let dir = tempfile::tempdir().unwrap();
        for spk in ["19", "26"] {
            let chapter = dir.path().join(spk).join("101");
            std::fs::create_dir_all(&chapter).unwrap();
            let mut trans = String::new();
            for utt in 0..2 {
                let id = format!("{spk}-101-{utt:04}");
                let w = Waveform::new(vec![0.05; 800], 16_000).unwrap();
                write_wav(&chapter.join(format!("{id}.wav")), &w).unwrap();
                trans.push_str(&format!("{id} SOME TEXT {utt} FOR {spk}\n"));
            }
            std::fs::write(chapter.join(format!("{spk}-101.trans.txt")), trans).unwrap();
        }
        let report = ingest(dir.path(), IngestLayout::Librispeech, Some("test")).unwrap();
        assert_eq!(report.manifest.len(), 4);
        // numbers are stripped by normalization, pairing must be positional
        assert_eq!(report.manifest.records[0].transcript, "some text for");
        assert!(report
            .manifest
            .records
            .iter()
            .all(|r| r.audio_path.exists()));
    }

    #[test]
    fn ingest_empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        match ingest(dir.path(), IngestLayout::Flat, None) {
            Err(Error::Config(msg)) => assert!(msg.contains("zero records")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn write_corpus_produces_loadable_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_utterances: 2,
            dev_utterances: 1,
            test_utterances: 1,
            ..Default::default()
        };
        let [train, dev, test] = write_corpus(dir.path(), &cfg).unwrap();
        for path in [&train, &dev, &test] {
            let manifest = DatasetManifest::load(path).unwrap();
            let audio = manifest.load_audio().unwrap();
            assert!(!audio.is_empty());
            assert!(audio[0].0.duration() > 2.0);
        }
    }
}
