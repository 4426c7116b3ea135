use std::fmt::Write as _;
use std::str::FromStr;

use super::TrainError;
use crate::model::ModelConfig;

/// Training hyperparameters plus the model architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub tbptt_length: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub p_phone: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            batch_size: 8,
            tbptt_length: 64,
            learning_rate: 1e-4,
            clip_norm: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            p_phone: 0.5,
            steps: 1000,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, TrainError> {
    value.parse().map_err(|_| TrainError::Config {
        line,
        msg: format!("bad value {value:?} for {key}"),
    })
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            batch_size,
            tbptt_length,
            learning_rate,
            clip_norm,
            adam_beta1,
            adam_beta2,
            adam_eps,
            p_phone,
            steps,
            checkpoint_every,
            seed
        )
    };
}

macro_rules! model_fields {
    ($m:ident) => {
        $m!(
            vocab_size,
            embed_dim,
            smrc_channels,
            smrc_stacks,
            enc_hidden,
            prenet_hidden,
            prenet_layers,
            prenet_keep,
            attn_hidden,
            num_mixes,
            dec_hidden,
            dec_layers,
            cell_keep,
            n_mels,
            init_scale,
            attn_step_bias,
            bn_momentum,
            bn_eps
        )
    };
}

impl TrainConfig {
    /// Flat `key = value` text, one key per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( writeln!(out, "{} = {}", stringify!($f), self.$f).unwrap(); )* };
        }
        macro_rules! emit_model {
            ($($f:ident),*) => { $( writeln!(out, "{} = {}", stringify!($f), self.model.$f).unwrap(); )* };
        }
        fields!(emit);
        model_fields!(emit_model);
        let kernels: Vec<String> = self.model.smrc_kernels.iter().map(usize::to_string).collect();
        writeln!(out, "smrc_kernels = {}", kernels.join(",")).unwrap();
        out
    }

    /// Parses config text over the defaults. Blank lines and `#` comments
    /// are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(TrainError::Config {
                line: line_no,
                msg: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            macro_rules! set {
                ($($f:ident),*) => {
                    match key {
                        $( stringify!($f) => { cfg.$f = parse(key, value, line_no)?; continue; } )*
                        _ => {}
                    }
                };
            }
            macro_rules! set_model {
                ($($f:ident),*) => {
                    match key {
                        $( stringify!($f) => { cfg.model.$f = parse(key, value, line_no)?; continue; } )*
                        _ => {}
                    }
                };
            }
            fields!(set);
            model_fields!(set_model);
            if key == "smrc_kernels" {
                cfg.model.smrc_kernels = value
                    .split(',')
                    .map(|k| parse(key, k.trim(), line_no))
                    .collect::<Result<_, _>>()?;
                continue;
            }
            return Err(TrainError::UnknownKey(key.to_string()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size == 0 || self.tbptt_length == 0 {
            return Err(TrainError::Invalid("batch_size and tbptt_length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_phone) {
            return Err(TrainError::Invalid("p_phone must be in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(TrainError::Invalid("learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 3.5e-4;
        cfg.model.smrc_kernels = vec![1, 3];
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(
            TrainConfig::parse("batch_size = 4\nlearning_rat = 1"),
            Err(TrainError::UnknownKey(k)) if k == "learning_rat"
        ));
        assert!(matches!(TrainConfig::parse("steps = many"), Err(TrainError::Config { line: 1, .. })));
        assert!(TrainConfig::parse("# only a comment\n\nsteps = 3").is_ok());
    }
}
