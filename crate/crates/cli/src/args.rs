//! Flag parsing: `--flag value` pairs plus boolean switches.

use std::path::PathBuf;

use latage::error::{Error, Result};

pub struct Args<'a> {
    argv: &'a [String],
}

impl<'a> Args<'a> {
    pub fn new(argv: &'a [String]) -> Self {
        Self { argv }
    }

    pub fn opt_string(&self, flag: &str) -> Option<String> {
        self.argv.windows(2).find(|w| w[0] == flag).map(|w| w[1].clone())
    }

    pub fn string(&self, flag: &str) -> Result<String> {
        self.opt_string(flag)
            .ok_or_else(|| Error::InvalidInput(format!("missing required flag {flag}")))
    }

    pub fn path(&self, flag: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.string(flag)?))
    }

    pub fn flag(&self, flag: &str) -> bool {
        self.argv.iter().any(|a| a == flag)
    }

    pub fn usize(&self, flag: &str) -> Result<usize> {
        let raw = self.string(flag)?;
        raw.parse().map_err(|_| Error::InvalidInput(format!("{flag}: not an integer: {raw:?}")))
    }

    pub fn opt_u64(&self, flag: &str) -> Result<Option<u64>> {
        match self.opt_string(flag) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("{flag}: not an integer: {raw:?}"))),
        }
    }

    pub fn f64_list(&self, flag: &str) -> Result<Vec<f64>> {
        let raw = self.string(flag)?;
        raw.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("{flag}: not a number: {tok:?}")))
            })
            .collect()
    }
}
