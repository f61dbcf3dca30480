//! On-disk formats: field files (SPFD) and checkpoints (SPON).
//!
//! Both formats are little-endian and round-trip bitwise. Checkpoints carry
//! a length-prefixed UTF-8 metadata header (config echo, PRNG algorithm,
//! shapes) followed by ordered parameter blobs and a 64-bit FNV-1a checksum
//! over everything before it.

use std::io::{self, Read, Write};

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use specns_core::basis::{BasisKind, BasisSpec, Coeffs, SpectralField};
use specns_core::operator_net::{ConvParams, ConvSpec, NetParamsPhi, NetParamsU};
use specns_core::trainer::TrainedBlock;

pub const FIELD_MAGIC: &[u8; 4] = b"SPFD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPON";
pub const FORMAT_VERSION: u32 = 1;

/// Data-integrity failure while reading a file.
#[derive(Debug)]
pub struct IntegrityError(pub String);

impl std::fmt::Display for IntegrityError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "data integrity error: {}", self.0)
    }
}

impl std::error::Error for IntegrityError {}

fn kind_code(kind: BasisKind) -> u8 {
    match kind {
        BasisKind::LegendreDirichlet => 0,
        BasisKind::LegendreNeumann => 1,
        BasisKind::Fourier => 2,
    }
}

fn kind_from_code(code: u8) -> Result<BasisKind, IntegrityError> {
    match code {
        0 => Ok(BasisKind::LegendreDirichlet),
        1 => Ok(BasisKind::LegendreNeumann),
        2 => Ok(BasisKind::Fourier),
        other => Err(IntegrityError(format!("unknown basis kind code {other}"))),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn write_f64_slice(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        write_f64(w, *x)?;
    }
    Ok(())
}

fn read_f64_vec(r: &mut impl Read) -> io::Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Writes one spectral field (all components) with its time stamp.
pub fn write_field(w: &mut impl Write, field: &SpectralField, time: f64) -> io::Result<()> {
    w.write_all(FIELD_MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, field.axes.len() as u32)?;
    for a in &field.axes {
        w.write_all(&[kind_code(a.kind)])?;
    }
    for a in &field.axes {
        write_u32(w, a.n_modes as u32)?;
    }
    write_u32(w, field.components.len() as u32)?;
    write_f64(w, time)?;
    for c in &field.components {
        match c {
            Coeffs::Real(a) => {
                for v in a.iter() {
                    write_f64(w, *v)?;
                }
            }
            Coeffs::Complex(a) => {
                for z in a.iter() {
                    write_f64(w, z.re)?;
                    write_f64(w, z.im)?;
                }
            }
        }
    }
    Ok(())
}

/// Reads one field written by `write_field`.
pub fn read_field(r: &mut impl Read) -> Result<(SpectralField, f64), Box<dyn std::error::Error>> {
    let magic = read_exact::<4>(r)?;
    if &magic != FIELD_MAGIC {
        return Err(Box::new(IntegrityError("bad field magic".into())));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Box::new(IntegrityError(format!("unsupported field version {version}"))));
    }
    let dim = read_u32(r)? as usize;
    if !(1..=3).contains(&dim) {
        return Err(Box::new(IntegrityError(format!("bad dimension {dim}"))));
    }
    let mut kinds = Vec::with_capacity(dim);
    for _ in 0..dim {
        kinds.push(kind_from_code(read_exact::<1>(r)?[0])?);
    }
    let mut sizes = Vec::with_capacity(dim);
    for _ in 0..dim {
        sizes.push(read_u32(r)? as usize);
    }
    let components = read_u32(r)? as usize;
    let time = read_f64(r)?;
    let axes: Vec<BasisSpec> = kinds
        .iter()
        .zip(&sizes)
        .map(|(&kind, &n)| BasisSpec { kind, n_modes: n })
        .collect();
    let complex = kinds[0] == BasisKind::Fourier;
    let count: usize = sizes.iter().product();
    let mut comps = Vec::with_capacity(components);
    for _ in 0..components {
        if complex {
            let mut a = ArrayD::<Complex64>::zeros(IxDyn(&sizes));
            for v in a.iter_mut() {
                let re = read_f64(r)?;
                let im = read_f64(r)?;
                *v = Complex64::new(re, im);
            }
            comps.push(Coeffs::Complex(a));
        } else {
            let mut a = ArrayD::<f64>::zeros(IxDyn(&sizes));
            for v in a.iter_mut() {
                *v = read_f64(r)?;
            }
            comps.push(Coeffs::Real(a));
        }
    }
    let _ = count;
    Ok((SpectralField { axes, components: comps }, time))
}

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn write_conv_spec(w: &mut impl Write, s: &ConvSpec) -> io::Result<()> {
    write_u32(w, s.in_channels as u32)?;
    write_u32(w, s.out_channels as u32)?;
    write_u32(w, s.kernel as u32)?;
    write_u32(w, s.input_shape.len() as u32)?;
    for &e in &s.input_shape {
        write_u32(w, e as u32)?;
    }
    Ok(())
}

fn read_conv_spec(r: &mut impl Read) -> io::Result<ConvSpec> {
    let in_channels = read_u32(r)? as usize;
    let out_channels = read_u32(r)? as usize;
    let kernel = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let mut input_shape = Vec::with_capacity(d);
    for _ in 0..d {
        input_shape.push(read_u32(r)? as usize);
    }
    Ok(ConvSpec::new(in_channels, out_channels, kernel, input_shape))
}

/// Serializes trained blocks with a metadata header.
pub fn write_checkpoint(
    header: &str,
    blocks: &[TrainedBlock],
    out: &mut impl Write,
) -> io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut buf, FORMAT_VERSION)?;
    let hb = header.as_bytes();
    write_u32(&mut buf, hb.len() as u32)?;
    buf.extend_from_slice(hb);
    write_u32(&mut buf, blocks.len() as u32)?;
    for b in blocks {
        write_u32(&mut buf, b.block as u32)?;
        // Velocity network: conv kernel, conv bias, then stacked heads.
        write_conv_spec(&mut buf, &b.params_u.conv_spec)?;
        write_f64_slice(&mut buf, &b.params_u.conv.kernel)?;
        write_f64_slice(&mut buf, &b.params_u.conv.bias)?;
        write_u32(&mut buf, b.params_u.out_len as u32)?;
        write_u32(&mut buf, b.params_u.heads.len() as u32)?;
        for h in &b.params_u.heads {
            write_f64_slice(&mut buf, h)?;
        }
        // Correction network blobs, per step.
        write_conv_spec(&mut buf, &b.params_phi.conv_spec)?;
        buf.push(b.params_phi.shared_conv as u8);
        write_u32(&mut buf, b.params_phi.convs.len() as u32)?;
        for c in &b.params_phi.convs {
            write_f64_slice(&mut buf, &c.kernel)?;
            write_f64_slice(&mut buf, &c.bias)?;
        }
        write_u32(&mut buf, b.params_phi.out_len as u32)?;
        write_u32(&mut buf, b.params_phi.heads.len() as u32)?;
        for h in &b.params_phi.heads {
            write_f64_slice(&mut buf, h)?;
        }
    }
    let checksum = fnv1a64(&buf);
    out.write_all(&buf)?;
    write_u64(out, checksum)?;
    Ok(())
}

/// Reads a checkpoint, validating the checksum and shapes.
pub fn read_checkpoint(
    bytes: &[u8],
) -> Result<(String, Vec<TrainedBlock>), Box<dyn std::error::Error>> {
    if bytes.len() < 12 {
        return Err(Box::new(IntegrityError("checkpoint too short".into())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Box::new(IntegrityError(format!(
            "checksum mismatch: stored {stored:016x}, computed {computed:016x}"
        ))));
    }
    let mut r = body;
    let magic = read_exact::<4>(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Box::new(IntegrityError("bad checkpoint magic".into())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Box::new(IntegrityError(format!("unsupported version {version}"))));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = String::from_utf8(hbuf)
        .map_err(|_| IntegrityError("metadata header is not UTF-8".into()))?;
    let n_blocks = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let block = read_u32(&mut r)? as usize;
        let conv_spec = read_conv_spec(&mut r)?;
        let kernel = read_f64_vec(&mut r)?;
        let bias = read_f64_vec(&mut r)?;
        if kernel.len() != conv_spec.kernel_len() || bias.len() != conv_spec.out_channels {
            return Err(Box::new(IntegrityError("velocity conv blob length mismatch".into())));
        }
        let out_len = read_u32(&mut r)? as usize;
        let n_heads = read_u32(&mut r)? as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let h = read_f64_vec(&mut r)?;
            if h.len() != conv_spec.feature_len() * out_len {
                return Err(Box::new(IntegrityError("velocity head blob length mismatch".into())));
            }
            heads.push(h);
        }
        let params_u = NetParamsU {
            conv_spec: conv_spec.clone(),
            conv: ConvParams { kernel, bias },
            heads,
            out_len,
        };
        let phi_spec = read_conv_spec(&mut r)?;
        let shared = read_exact::<1>(&mut r)?[0] != 0;
        let n_convs = read_u32(&mut r)? as usize;
        let mut convs = Vec::with_capacity(n_convs);
        for _ in 0..n_convs {
            let kernel = read_f64_vec(&mut r)?;
            let bias = read_f64_vec(&mut r)?;
            if kernel.len() != phi_spec.kernel_len() || bias.len() != phi_spec.out_channels {
                return Err(Box::new(IntegrityError(
                    "correction conv blob length mismatch".into(),
                )));
            }
            convs.push(ConvParams { kernel, bias });
        }
        let out_len = read_u32(&mut r)? as usize;
        let n_heads = read_u32(&mut r)? as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let h = read_f64_vec(&mut r)?;
            if h.len() != phi_spec.feature_len() * out_len {
                return Err(Box::new(IntegrityError(
                    "correction head blob length mismatch".into(),
                )));
            }
            heads.push(h);
        }
        let params_phi = NetParamsPhi {
            conv_spec: phi_spec,
            shared_conv: shared,
            convs,
            heads,
            out_len,
        };
        blocks.push(TrainedBlock { block, params_u, params_phi });
    }
    Ok((header, blocks))
}
