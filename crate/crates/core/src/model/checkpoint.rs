//! Binary checkpoint format.
//!
//! ```text
//! magic        5 bytes   "MEXM1"
//! config       9 x u32   input_dim, hidden_dim, num_layers, num_classes,
//!                        head_hidden_dim, activation (0 relu, 1 tanh),
//!                        residual (0/1), seed low word, seed high word
//! parameters   n x f64   in `Params::groups` order
//! ```
//!
//! All integers and floats are little-endian. Nothing may follow the last
//! parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Activation, ModelConfig, MultiExitModel, Params};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MEXM1";

pub fn write_checkpoint<W: Write>(model: &MultiExitModel, mut out: W) -> Result<()> {
    let c = model.config();
    out.write_all(CHECKPOINT_MAGIC)?;
    let dims = [
        c.input_dim,
        c.hidden_dim,
        c.num_layers,
        c.num_classes,
        c.head_hidden_dim,
    ];
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidInput(format!("dimension {d} does not fit in 32 bits")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&c.activation.code().to_le_bytes())?;
    out.write_all(&u32::from(c.residual).to_le_bytes())?;
    out.write_all(&(c.seed as u32).to_le_bytes())?;
    out.write_all(&((c.seed >> 32) as u32).to_le_bytes())?;
    for (_, group) in model.params().groups() {
        for x in group {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R, location: &str) -> Result<MultiExitModel> {
    let mut magic = [0u8; 5];
    read_exact(&mut input, &mut magic, location, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(location, "bad magic, not an MEXM1 checkpoint"));
    }
    let mut words = [0u32; 9];
    for w in words.iter_mut() {
        let mut buf = [0u8; 4];
        read_exact(&mut input, &mut buf, location, "config header")?;
        *w = u32::from_le_bytes(buf);
    }
    let activation = Activation::from_code(words[5])
        .ok_or_else(|| Error::format(location, format!("unknown activation code {}", words[5])))?;
    let residual = match words[6] {
        0 => false,
        1 => true,
        other => return Err(Error::format(location, format!("bad residual flag {other}"))),
    };
    let config = ModelConfig {
        input_dim: words[0] as usize,
        hidden_dim: words[1] as usize,
        num_layers: words[2] as usize,
        num_classes: words[3] as usize,
        head_hidden_dim: words[4] as usize,
        activation,
        residual,
        seed: u64::from(words[7]) | (u64::from(words[8]) << 32),
    };
    config
        .validate()
        .map_err(|e| Error::format(location, e.to_string()))?;

    let mut params = Params::zeros(&config);
    for group in params.groups_mut() {
        for x in group.iter_mut() {
            let mut buf = [0u8; 8];
            read_exact(&mut input, &mut buf, location, "parameters")?;
            *x = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::format(location, "trailing bytes after parameters"));
    }
    MultiExitModel::from_params(config, params).map_err(|e| Error::format(location, e.to_string()))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], location: &str, what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(location, format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn save_checkpoint(model: &MultiExitModel, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<MultiExitModel> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file), &path.display().to_string())
}
