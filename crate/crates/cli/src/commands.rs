use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixtts_core::dsp::{read_wav, write_wav, MelSpectrogram, Waveform};
use mixtts_core::frontend::{encode_fixed, load_lexicon, mix_words, EncodeMode, Lexicon, SymbolInventory, UtteranceRecord};
use mixtts_core::inversion::{bench_strtf, invert, paper_methods, paper_reference_rows, InversionConfig};
use mixtts_core::rng::derived_rng;
use mixtts_core::trainer::{self, continue_training, load_model, prepare, Checkpoint, Corpus, TrainConfig, Trainer};
use serde_json::json;

use crate::{Command, InputMode, MethodArg, UsageError};

const MIX_TAG: u64 = 0x6d69_78;
const GEN_TAG: u64 = 0x6765_6e;

fn log_config(command: &str, config: serde_json::Value) {
    log::info!("{command} config {config}");
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            manifest,
            lexicon,
            out,
            seed,
        } => {
            log_config(
                "prepare",
                json!({ "manifest": manifest, "lexicon": lexicon, "out": out, "seed": seed }),
            );
            let s = prepare(&manifest, &lexicon, &out).context("prepare failed")?;
            println!(
                "{}",
                json!({ "utterances": s.utterances, "frames": s.frames, "oov_words": s.oov_words })
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            steps,
            seed,
        } => train(&config, &data, &out, resume.as_deref(), steps, seed),
        Command::Synth {
            ckpt,
            text,
            mode,
            lexicon,
            out,
            mel_out,
            method,
            max_frames,
            seed,
        } => synth(SynthArgs {
            ckpt,
            text,
            mode,
            lexicon,
            out,
            mel_out,
            method: method.0.with_seed(seed),
            max_frames,
            seed,
        }),
        Command::Invert { mel, method, out, seed } => {
            let method = method.0.with_seed(seed);
            log_config(
                "invert",
                json!({ "mel": mel, "method": method.spec(), "history": method.history, "out": out, "seed": seed }),
            );
            let mut f = fs::File::open(&mel).with_context(|| format!("opening {}", mel.display()))?;
            let spec = MelSpectrogram::read_from(&mut f).with_context(|| format!("reading {}", mel.display()))?;
            let wave = invert(&spec, &method)?;
            write_wav(&out, &wave)?;
            println!("{}", json!({ "frames": spec.n_frames(), "samples": wave.len(), "method": method.label() }));
            Ok(())
        }
        Command::Bench {
            fixture,
            methods,
            runs,
            seed,
        } => bench(&fixture, methods, runs, seed),
    }
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, steps: Option<u64>, seed: Option<u64>) -> Result<()> {
    let corpus = Corpus::load(data).with_context(|| format!("loading {}", data.display()))?;
    let mut trainer = match resume {
        Some(path) => {
            if seed.is_some() {
                return Err(UsageError("--seed cannot change a resumed run".into()).into());
            }
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::resume(&ck, corpus)?
        }
        None => {
            let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = TrainConfig::parse(&text).with_context(|| format!("parsing {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Trainer::new(cfg, corpus)?
        }
    };
    if let Some(s) = steps {
        trainer.config.steps = s;
    }
    fs::create_dir_all(out)?;
    let resolved = trainer.config.to_text();
    fs::write(out.join("config.txt"), &resolved)?;
    log_config(
        "train",
        json!({
            "data": data,
            "out": out,
            "resume": resume,
            "start_step": trainer.step,
            "parameters": trainer.store.num_params(),
            "utterances": trainer.corpus.len(),
            "config": resolved.lines().collect::<Vec<_>>(),
        }),
    );
    let mut log = BufWriter::new(fs::File::create(out.join("train.jsonl"))?);
    let mut save = |ck: &Checkpoint| -> Result<(), trainer::TrainError> {
        let step_path = out.join(format!("step-{:08}.ckpt", ck.step));
        ck.save(&step_path)?;
        save_atomic(ck, &out.join("latest.ckpt")).map_err(|e| trainer::TrainError::Checkpoint(e.to_string()))?;
        log::info!("checkpoint {}", step_path.display());
        Ok(())
    };
    let trainer = continue_training(trainer, &mut log, &mut save)?;
    log.flush()?;
    println!("{}", json!({ "steps": trainer.step, "checkpoint": out.join("latest.ckpt") }));
    Ok(())
}

struct SynthArgs {
    ckpt: PathBuf,
    text: String,
    mode: InputMode,
    lexicon: Option<PathBuf>,
    out: PathBuf,
    mel_out: Option<PathBuf>,
    method: InversionConfig,
    max_frames: usize,
    seed: u64,
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.max_frames == 0 {
        return Err(UsageError("--max-frames must be at least 1".into()).into());
    }
    let lexicon = match (&a.lexicon, a.mode) {
        (Some(p), _) => load_lexicon(p).with_context(|| format!("loading {}", p.display()))?,
        (None, InputMode::Chars) => Lexicon::default(),
        (None, _) => return Err(UsageError("--lexicon is required for pwcb and mixed modes".into()).into()),
    };
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = load_model(&ck)?;
    let p_phone = TrainConfig::parse(&ck.config_text)?.p_phone;
    log_config(
        "synth",
        json!({
            "ckpt": a.ckpt,
            "text": a.text,
            "mode": format!("{:?}", a.mode),
            "lexicon": a.lexicon,
            "out": a.out,
            "method": a.method.spec(),
            "max_frames": a.max_frames,
            "seed": a.seed,
        }),
    );
    let record = UtteranceRecord::from_text("synth", &a.text, Some(&lexicon));
    let seq = match a.mode {
        InputMode::Chars => encode_fixed(&record, &lexicon, EncodeMode::Chars)?,
        InputMode::Pwcb => encode_fixed(&record, &lexicon, EncodeMode::Pwcb)?,
        InputMode::Mixed(s) => mix_words(&record, &lexicon, p_phone, &mut derived_rng(s, &[MIX_TAG]))?,
    };
    if seq.is_empty() {
        return Err(UsageError("text has nothing to say".into()).into());
    }
    let mask: String = seq.mask.iter().map(|m| char::from(b'0' + m)).collect();
    log::info!("input {}", seq.display(SymbolInventory::standard()));
    log::info!("mask {mask}");
    let gen = mixtts_core::decoder::generate(&seq, &model.store, &model.config, a.max_frames, &mut derived_rng(a.seed, &[GEN_TAG]))?;
    if !gen.stopped {
        log::warn!("attention did not reach the end within {} frames", a.max_frames);
    }
    let mel = MelSpectrogram {
        frames: gen.frames,
        normalized: true,
        stats: Some(model.stats),
    }
    .denormalized()?;
    if let Some(p) = &a.mel_out {
        let mut f = BufWriter::new(fs::File::create(p)?);
        mel.write_to(&mut f)?;
        f.flush()?;
    }
    let wave = invert(&mel, &a.method)?;
    write_wav(&a.out, &wave)?;
    println!(
        "{}",
        json!({ "frames": mel.n_frames(), "samples": wave.len(), "stopped": gen.stopped, "mask": mask })
    );
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    found.sort();
    Ok(found)
}

fn bench(fixture: &Path, methods: Vec<MethodArg>, runs: usize, seed: u64) -> Result<()> {
    let mut files = wav_files(fixture)?;
    if files.is_empty() && fixture.join("wavs").is_dir() {
        files = wav_files(&fixture.join("wavs"))?;
    }
    if files.is_empty() {
        anyhow::bail!("no .wav files in {}", fixture.display());
    }
    let waves = files
        .iter()
        .map(|p| read_wav(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<Waveform>>>()?;
    let defaults = methods.is_empty();
    let configs: Vec<InversionConfig> = if defaults {
        paper_methods(seed)
    } else {
        methods.into_iter().map(|m| m.0.with_seed(seed)).collect()
    };
    log_config(
        "bench",
        json!({
            "fixture": fixture,
            "files": files.len(),
            "audio_seconds": waves.iter().map(Waveform::duration_secs).sum::<f64>(),
            "methods": configs.iter().map(InversionConfig::spec).collect::<Vec<_>>(),
            "runs": runs,
            "seed": seed,
        }),
    );
    let reports = bench_strtf(&configs, &waves, runs)?;
    if defaults {
        for r in paper_reference_rows() {
            log::info!("reference {}", serde_json::to_string(&r)?);
        }
    }
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for r in &reports {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
