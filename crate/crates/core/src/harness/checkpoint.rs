//! Binary model checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "LYAP" | version u32 | input rank u32 | dims u32… | layer count u32 | layers…
//!        | config digest [u8; 32] | parameter count u64 | f32 payload
//! layer: kind code u32 | arg count u32 | args u32…   (residual: args = [branch
//!        length], followed by the branch layers)
//! ```
//!
//! Parameters are stored weight then bias for each dense/conv layer in
//! depth-first order. Power-iteration vectors are not stored.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};

pub const MAGIC: &[u8; 4] = b"LYAP";
pub const VERSION: u32 = 1;
/// SHA-256 of the canonical JSON of the configuration a model was trained with.
pub type Digest = [u8; 32];

const DENSE: u32 = 1;
const CONV: u32 = 2;
const LEAKY_RELU: u32 = 3;
const MAX_POOL: u32 = 4;
const AVG_POOL: u32 = 5;
const FLATTEN: u32 = 6;
const RESIDUAL: u32 = 7;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Size(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_layers(out: &mut Vec<u8>, specs: &[LayerSpec]) -> Result<()> {
    for s in specs {
        let (code, args): (u32, Vec<usize>) = match s {
            LayerSpec::Dense { input, output } => (DENSE, vec![*input, *output]),
            LayerSpec::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => (CONV, vec![*out_ch, *in_ch, *kh, *kw, *stride, *pad]),
            LayerSpec::LeakyRelu { slope } => (LEAKY_RELU, vec![slope.to_bits() as usize]),
            LayerSpec::MaxPool { window } => (MAX_POOL, vec![*window]),
            LayerSpec::AvgPool { window } => (AVG_POOL, vec![*window]),
            LayerSpec::Flatten => (FLATTEN, vec![]),
            LayerSpec::Residual { branch } => (RESIDUAL, vec![branch.len()]),
        };
        out.extend_from_slice(&code.to_le_bytes());
        put_u32(out, args.len())?;
        for a in args {
            put_u32(out, a)?;
        }
        if let LayerSpec::Residual { branch } = s {
            put_layers(out, branch)?;
        }
    }
    Ok(())
}

/// Serializes `model` with the digest of its training configuration.
pub fn encode(model: &Model, digest: &Digest) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.input_shape().len())?;
    for &d in model.input_shape() {
        put_u32(&mut out, d)?;
    }
    let specs = model.specs();
    put_u32(&mut out, specs.len())?;
    put_layers(&mut out, &specs)?;
    out.extend_from_slice(digest);
    let params = model.params();
    let count: usize = params.iter().map(|p| p.len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated in {what}")))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn layers(&mut self, count: usize, depth: usize) -> Result<Vec<LayerSpec>> {
        if depth > 64 {
            return Err(Error::format(self.pos as u64, "residual nesting too deep"));
        }
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = self.pos as u64;
            let code = self.u32("layer kind")?;
            let nargs = self.u32("layer argument count")? as usize;
            let want = match code {
                DENSE => 2,
                CONV => 6,
                LEAKY_RELU | MAX_POOL | AVG_POOL | RESIDUAL => 1,
                FLATTEN => 0,
                other => return Err(Error::format(at, format!("unknown layer kind {other}"))),
            };
            if nargs != want {
                return Err(Error::format(
                    at + 4,
                    format!("layer kind {code} takes {want} arguments, found {nargs}"),
                ));
            }
            let a: Vec<usize> = (0..nargs)
                .map(|_| self.u32("layer arguments").map(|v| v as usize))
                .collect::<Result<_>>()?;
            out.push(match code {
                DENSE => LayerSpec::Dense {
                    input: a[0],
                    output: a[1],
                },
                CONV => LayerSpec::Conv {
                    out_ch: a[0],
                    in_ch: a[1],
                    kh: a[2],
                    kw: a[3],
                    stride: a[4],
                    pad: a[5],
                },
                LEAKY_RELU => LayerSpec::LeakyRelu {
                    slope: f32::from_bits(a[0] as u32),
                },
                MAX_POOL => LayerSpec::MaxPool { window: a[0] },
                AVG_POOL => LayerSpec::AvgPool { window: a[0] },
                FLATTEN => LayerSpec::Flatten,
                _ => LayerSpec::Residual {
                    branch: self.layers(a[0], depth + 1)?,
                },
            });
        }
        Ok(out)
    }
}

/// Rebuilds a model from checkpoint bytes. Any other version is rejected.
pub fn decode(bytes: &[u8]) -> Result<(Model, Digest)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("checkpoint version {version}, this build reads version {VERSION}"),
        ));
    }
    let rank = r.u32("input rank")? as usize;
    if rank > 8 {
        return Err(Error::format(
            8,
            format!("input rank {rank} is implausible"),
        ));
    }
    let input: Vec<usize> = (0..rank)
        .map(|_| r.u32("input shape").map(|v| v as usize))
        .collect::<Result<_>>()?;
    let n_layers = r.u32("layer count")? as usize;
    let table_at = r.pos as u64;
    let specs = r.layers(n_layers, 0)?;
    let digest: Digest = r.take(32, "config digest")?.try_into().expect("32 bytes");
    let count_at = r.pos as u64;
    let count = r.u64("parameter count")?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(input, &specs, &mut rng)
        .map_err(|e| Error::format(table_at, format!("layer table does not compose: {e}")))?;
    if count != model.param_count() as u64 {
        return Err(Error::format(
            count_at,
            format!(
                "{count} parameters stored, layer table needs {}",
                model.param_count()
            ),
        ));
    }
    for p in model.params_mut() {
        let at = r.pos as u64;
        let raw = r.take(p.len() * 4, "parameter payload")?;
        for (dst, chunk) in p.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
        }
        p.check_finite()
            .map_err(|_| Error::format(at, "non-finite parameter in payload"))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after payload"));
    }
    Ok((model, digest))
}

pub fn save(path: &Path, model: &Model, digest: &Digest) -> Result<()> {
    let bytes = encode(model, digest)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Digest)> {
    decode(&fs::read(path)?)
}
