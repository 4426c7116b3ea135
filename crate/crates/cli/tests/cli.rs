use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mixtts_core::fixtures;

const TINY_CONFIG: &str = "\
# tiny model for command-line tests
embed_dim = 4
smrc_channels = 3
smrc_stacks = 1
enc_hidden = 3
prenet_hidden = 4
attn_hidden = 5
num_mixes = 2
dec_hidden = 4
batch_size = 2
tbptt_length = 16
learning_rate = 1e-3
steps = 4
checkpoint_every = 2
seed = 5
";

fn mixtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixtts"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mixtts(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    mixtts(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch() -> PathBuf {
    tempfile::Builder::new()
        .prefix("cli-")
        .tempdir_in(env!("CARGO_TARGET_TMPDIR"))
        .unwrap()
        .keep()
}

struct Setup {
    root: PathBuf,
    raw: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

/// A prepared corpus and a briefly trained checkpoint shared by all tests.
fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let root = scratch();
        let raw = root.join("raw");
        fixtures::write_dataset(&raw, 4, 250, 3).unwrap();
        let data = root.join("data");
        ok(&[
            "prepare",
            "--manifest",
            s(&raw.join("metadata.csv")),
            "--lexicon",
            s(&raw.join("lexicon.txt")),
            "--out",
            s(&data),
        ]);
        let config = root.join("tiny.conf");
        fs::write(&config, TINY_CONFIG).unwrap();
        let run = root.join("run");
        ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
        Setup {
            ckpt: run.join("latest.ckpt"),
            root,
            raw,
            data,
        }
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut all = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            all.extend(dir_bytes(&p));
        } else {
            all.push((p.to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    all.sort();
    all
}

fn losses(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{} {} {}", v["step"], v["loss"], v["grad_norm"])
        })
        .collect()
}

fn synth(text: &str, mode: &str, lexicon: Option<&Path>, seed: &str, tag: &str) -> (Vec<u8>, Vec<u8>, String) {
    let st = setup();
    let wav = st.root.join(format!("{tag}.wav"));
    let mel = st.root.join(format!("{tag}.mel"));
    let mut args = vec![
        "synth", "--ckpt", s(&st.ckpt), "--text", text, "--mode", mode, "--out", s(&wav), "--mel-out", s(&mel),
        "--method", "gl:3", "--max-frames", "24", "--seed", seed,
    ];
    if let Some(l) = lexicon {
        args.extend(["--lexicon", s(l)]);
    }
    let out = ok(&args);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    (fs::read(&wav).unwrap(), fs::read(&mel).unwrap(), summary["mask"].as_str().unwrap().to_string())
}

#[test]
fn exit_codes() {
    let st = setup();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["synth", "--ckpt", "x"]), 1);
    assert_eq!(code(&["invert", "--mel", "x", "--out", "y.wav", "--method", "wavenet:3"]), 1);
    assert_eq!(code(&["synth", "--ckpt", s(&st.ckpt), "--text", "the cat", "--mode", "pwcb", "--out", "z.wav"]), 1);
    assert_eq!(code(&["synth", "--ckpt", s(&st.ckpt), "--text", "the cat", "--mode", "chars", "--max-frames", "0", "--out", "z.wav"]), 1);
    let missing = st.root.join("missing.mel");
    assert_eq!(code(&["invert", "--mel", s(&missing), "--out", "y.wav"]), 2);
    let bad = st.root.join("bad.conf");
    fs::write(&bad, "learning_rat = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--data", s(&st.data), "--out", s(&st.root.join("bad"))]), 2);
    let empty = st.root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&["bench", "--fixture", s(&empty)]), 2);
}

#[test]
fn prepare_is_idempotent() {
    let st = setup();
    let out = st.root.join("again");
    let (manifest, lexicon) = (st.raw.join("metadata.csv"), st.raw.join("lexicon.txt"));
    let args = ["prepare", "--manifest", s(&manifest), "--lexicon", s(&lexicon), "--out", s(&out)];
    ok(&args);
    let first = dir_bytes(&out);
    ok(&args);
    assert_eq!(first, dir_bytes(&out));
    let strip = |v: Vec<(String, Vec<u8>)>, base: &Path| -> Vec<(String, Vec<u8>)> {
        v.into_iter().map(|(p, b)| (p.replace(s(base), ""), b)).collect()
    };
    assert_eq!(strip(first, &out), strip(dir_bytes(&st.data), &st.data));
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let st = setup();
    let run = st.root.join("run");
    assert!(run.join("step-00000002.ckpt").exists());
    assert!(run.join("step-00000004.ckpt").exists());
    assert_eq!(fs::read(run.join("step-00000004.ckpt")).unwrap(), fs::read(&st.ckpt).unwrap());
    assert_eq!(losses(&run).len(), 4);
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 5\n") && resolved.contains("steps = 4\n"));

    let resumed = st.root.join("resumed");
    ok(&[
        "train",
        "--config",
        s(&run.join("config.txt")),
        "--data",
        s(&st.data),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("step-00000002.ckpt")),
    ]);
    assert_eq!(losses(&resumed), losses(&run)[2..]);
    assert_eq!(fs::read(resumed.join("latest.ckpt")).unwrap(), fs::read(&st.ckpt).unwrap());
}

#[test]
fn train_seed_override_changes_the_run() {
    let st = setup();
    let config = st.root.join("tiny.conf");
    let other = st.root.join("reseeded");
    ok(&[
        "train", "--config", s(&config), "--data", s(&st.data), "--out", s(&other), "--seed", "6", "--steps", "2",
    ]);
    let l = losses(&other);
    assert_eq!(l.len(), 2);
    assert_ne!(l, losses(&st.root.join("run"))[..2]);
    assert!(fs::read_to_string(other.join("config.txt")).unwrap().contains("seed = 6\n"));
}

#[test]
fn chars_and_pwcb_use_different_masks() {
    let st = setup();
    let lex = st.raw.join("lexicon.txt");
    let (_, chars_mel, chars_mask) = synth("the cat sat", "chars", None, "1", "chars");
    let (_, pwcb_mel, pwcb_mask) = synth("the cat sat", "pwcb", Some(&lex), "1", "pwcb");
    assert!(chars_mask.chars().all(|c| c == '0'));
    assert!(pwcb_mask.contains('1'));
    assert_ne!(chars_mask, pwcb_mask);
    assert_ne!(chars_mel, pwcb_mel);
}

#[test]
fn out_of_vocabulary_words_fall_back_to_characters() {
    let st = setup();
    let (wav, _, mask) = synth("the zebra", "pwcb", Some(&st.raw.join("lexicon.txt")), "2", "oov");
    assert!(!wav.is_empty());
    // "the" is in the lexicon (dh ah) and "zebra" is spelled out
    assert!(mask.starts_with("11"));
    assert!(mask.ends_with("00000"));
}

#[test]
fn mixed_mode_is_seeded() {
    let st = setup();
    let lex = st.raw.join("lexicon.txt");
    let text = "the cat sat on the mat by the big green hill";
    let masks: Vec<String> = (0..6).map(|k| synth(text, &format!("mixed:{k}"), Some(&lex), "0", &format!("mix{k}")).2).collect();
    assert!(masks.iter().any(|m| *m != masks[0]));
    assert_eq!(synth(text, "mixed:3", Some(&lex), "0", "mix3b").2, masks[3]);
}

#[test]
fn homograph_lexicons_change_the_output() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/homograph");
    let text = fs::read_to_string(docs.join("sentence.txt")).unwrap();
    let (_, noun, noun_mask) = synth(text.trim(), "pwcb", Some(&docs.join("lexicon_noun.txt")), "0", "noun");
    let (_, verb, verb_mask) = synth(text.trim(), "pwcb", Some(&docs.join("lexicon_verb.txt")), "0", "verb");
    assert_eq!(noun_mask, verb_mask);
    assert!(noun_mask.contains('1'));
    assert_ne!(noun, verb);
}

#[test]
fn every_subcommand_is_deterministic() {
    let st = setup();
    let lex = st.raw.join("lexicon.txt");
    let a = synth("a red dog", "mixed:4", Some(&lex), "9", "det-a");
    let b = synth("a red dog", "mixed:4", Some(&lex), "9", "det-b");
    assert_eq!(a, b);
    let c = synth("a red dog", "mixed:4", Some(&lex), "10", "det-c");
    assert_ne!(a.0, c.0);

    let mel = st.root.join("det-a.mel");
    let invert = |tag: &str| {
        let out = st.root.join(format!("{tag}.wav"));
        ok(&["invert", "--mel", s(&mel), "--method", "lbfgs+gl:5:5", "--out", s(&out), "--seed", "3"]);
        fs::read(out).unwrap()
    };
    assert_eq!(invert("inv-a"), invert("inv-b"));

    let run = |tag: &str| {
        let out = st.root.join(tag);
        ok(&["train", "--config", s(&st.root.join("tiny.conf")), "--data", s(&st.data), "--out", s(&out)]);
        (losses(&out), fs::read(out.join("latest.ckpt")).unwrap())
    };
    assert_eq!(run("train-a"), run("train-b"));
}

#[test]
fn bench_prints_one_line_per_method() {
    let st = setup();
    let fixture = st.root.join("bench");
    fs::create_dir_all(&fixture).unwrap();
    fs::copy(st.raw.join("wavs").join(fixtures::record(0).id + ".wav"), fixture.join("a.wav")).unwrap();
    let out = ok(&["bench", "--fixture", s(&fixture), "--methods", "lbfgs:2,gl:2,lbfgs+gl:2:2", "--runs", "1"]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["label"], "Modified Griffin-Lim");
    assert!(lines.iter().all(|l| l["strtf"].as_f64().unwrap() > 0.0));
}
