use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Params;
use super::{MaskedLm, Scalar};
use crate::error::{Error, Result};

const MODEL_FORMAT: &str = "lexprompt-mlm-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    config: ModelConfig,
    vocab_size: usize,
    vocab_digest: String,
    param_count: usize,
}

impl<F: Scalar> MaskedLm<F> {
    /// One-line JSON header, then every parameter as little-endian `f32` in
    /// canonical row-major order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            config: self.config().clone(),
            vocab_size: self.vocab_size(),
            vocab_digest: self.vocab_digest().to_string(),
            param_count: self.params.count(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for v in self.params.to_flat() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(line.trim_end())?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        header.config.validate()?;
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::<F>::init(&header.config, header.vocab_size, &mut rng);
        if params.count() != header.param_count || payload.len() != 4 * header.param_count {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes for {} parameters",
                payload.len(),
                header.param_count
            )));
        }
        let values: Vec<F> = payload
            .chunks_exact(4)
            .map(|b| F::lit(f64::from(f32::from_le_bytes(b.try_into().expect("chunk of 4")))))
            .collect();
        params.set_flat(&values);
        MaskedLm::from_params(header.config, header.vocab_digest, params)
    }
}

#[cfg(test)]
mod tests {
    use crate::mlm::{MaskedLm, ModelConfig};
    use crate::tokenizer::SubwordVocabulary;

    #[test]
    fn round_trip_f32() {
        let vocab = SubwordVocabulary::train(&["abc", "abd"], 12).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            feed_forward: 12,
            max_len: 10,
            ..ModelConfig::default()
        };
        let model = MaskedLm::<f32>::new(cfg, &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let back = MaskedLm::<f32>::load(&path).unwrap();
        assert_eq!(back, model);
        back.check_vocab(&vocab).unwrap();
    }
}
