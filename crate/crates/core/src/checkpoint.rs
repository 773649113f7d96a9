//! Binary model checkpoints.
//!
//! All fields are little-endian, in this order:
//!
//! | field                                  | type          |
//! |----------------------------------------|---------------|
//! | magic `ENVSIREN`                       | 8 bytes       |
//! | format version (1)                     | u32           |
//! | in, out, hidden features, hidden layers| 4 x u32       |
//! | omega_0                                | f32           |
//! | final activation (0 sigmoid, 1 identity)| u32          |
//! | per linear layer: weight (row-major `fan_out x fan_in`), then bias | f32 |
//! | grid width, grid height                | 2 x u32       |
//! | log_min, log_max, eps                  | 3 x f64       |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::hdr::NormalizationParams;
use crate::mlp::{FinalActivation, Layer, MlpArchitecture, MlpParams};
use crate::siren::TrainedModel;

pub const MAGIC: &[u8; 8] = b"ENVSIREN";
pub const VERSION: u32 = 1;

fn activation_tag(a: FinalActivation) -> u32 {
    match a {
        FinalActivation::Sigmoid => 0,
        FinalActivation::Identity => 1,
    }
}

fn u32_field(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format {
        what: "checkpoint",
        reason: format!("{what} {v} does not fit in u32"),
    })
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, w: &mut W) -> Result<()> {
    let arch = model.arch();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for (v, what) in [
        (arch.in_features, "in_features"),
        (arch.out_features, "out_features"),
        (arch.hidden_features, "hidden_features"),
        (arch.hidden_layers, "hidden_layers"),
    ] {
        w.write_u32::<LE>(u32_field(v, what)?)?;
    }
    w.write_f32::<LE>(arch.omega_0)?;
    w.write_u32::<LE>(activation_tag(arch.final_activation))?;
    for layer in model.params.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            w.write_f32::<LE>(*v)?;
        }
    }
    w.write_u32::<LE>(u32_field(model.width, "grid width")?)?;
    w.write_u32::<LE>(u32_field(model.height, "grid height")?)?;
    for v in [model.norm.log_min, model.norm.log_max, model.norm.eps] {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        bad("truncated")
    } else {
        Error::IoStream(e)
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<TrainedModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = r.read_u32::<LE>().map_err(truncated)? as usize;
    }
    let omega_0 = r.read_f32::<LE>().map_err(truncated)?;
    let final_activation = match r.read_u32::<LE>().map_err(truncated)? {
        0 => FinalActivation::Sigmoid,
        1 => FinalActivation::Identity,
        t => return Err(bad(format!("unknown activation tag {t}"))),
    };
    let arch = MlpArchitecture {
        in_features: counts[0],
        out_features: counts[1],
        hidden_features: counts[2],
        hidden_layers: counts[3],
        omega_0,
        final_activation,
    };
    arch.validate().map_err(|e| bad(e.to_string()))?;
    if arch.parameter_count() > 1 << 28 {
        return Err(bad(format!(
            "implausible parameter count {}",
            arch.parameter_count()
        )));
    }

    let mut read_f32s = |n: usize| -> Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LE>(&mut v).map_err(truncated)?;
        Ok(v)
    };
    let mut layers = Vec::new();
    for (fan_out, fan_in) in arch.layer_shapes() {
        let weight = Array2::from_shape_vec((fan_out, fan_in), read_f32s(fan_out * fan_in)?)
            .expect("length matches shape");
        let bias = Array1::from(read_f32s(fan_out)?);
        layers.push(Layer { weight, bias });
    }
    let params = MlpParams::from_layers(arch, layers)?;

    let width = r.read_u32::<LE>().map_err(truncated)? as usize;
    let height = r.read_u32::<LE>().map_err(truncated)? as usize;
    let mut f = [0f64; 3];
    for v in &mut f {
        *v = r.read_f64::<LE>().map_err(truncated)?;
    }
    let norm = NormalizationParams {
        log_min: f[0],
        log_max: f[1],
        eps: f[2],
    };
    norm.validate().map_err(|e| bad(e.to_string()))?;
    if width == 0 || height == 0 {
        return Err(bad(format!("empty grid {width}x{height}")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainedModel {
        params,
        norm,
        width,
        height,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
