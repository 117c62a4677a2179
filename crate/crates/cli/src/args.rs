//! Minimal flag parser: `--key value` options and bare `--key` switches,
//! with unknown-argument detection.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;

use spikenet_core::error::Error;

pub struct Parsed {
    values: RefCell<HashMap<String, Option<String>>>,
}

/// Bare switches take no value; everything else does.
const SWITCHES: &[&str] = &["trace", "downsample", "json"];

impl Parsed {
    pub fn new(args: &[String]) -> Result<Self, Error> {
        let mut values = HashMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument '{arg}'")))?;
            if SWITCHES.contains(&key) {
                values.insert(key.to_string(), None);
                i += 1;
            } else {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                values.insert(key.to_string(), Some(value.clone()));
                i += 2;
            }
        }
        Ok(Parsed {
            values: RefCell::new(values),
        })
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, Error> {
        match self.values.borrow_mut().remove(key) {
            Some(Some(v)) => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!("missing required --{key} <path>"))),
        }
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>, Error> {
        self.parse_opt(key)
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>, Error> {
        self.parse_opt(key)
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.values.borrow_mut().remove(key) {
            Some(Some(v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for --{key}: '{v}'"))),
            Some(None) => Err(Error::Config(format!("--{key} needs a value"))),
            None => Ok(None),
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        self.values.borrow_mut().remove(key).is_some()
    }

    /// Errors on anything left unconsumed.
    pub fn finish(&self) -> Result<(), Error> {
        let values = self.values.borrow();
        if let Some(key) = values.keys().next() {
            return Err(Error::Config(format!("unknown option '--{key}'")));
        }
        Ok(())
    }
}
