//! Binary checkpoint of a run between outer iterations. Floats are stored as
//! raw bits, so a resumed run continues bitwise where it stopped.

use std::path::Path;

use agis_core::io::codec::{sha256, DecodeError, Decoder, Encoder};
use agis_core::io::{decode_state, encode_state, write_atomic};
use agis_core::solver::{Anderson, FrameCorrection, IterationRecord, RunProgress};
use nalgebra::Vector3;

use crate::CliError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AGCKPT\0\0";

fn encode_record(e: &mut Encoder, r: &IterationRecord) {
    e.u32(r.iteration);
    for x in [
        r.rms_residual,
        r.chi2,
        r.chi2_before_source,
        r.max_source_update,
        r.max_attitude_update,
        r.max_calibration_update,
        r.global_update,
    ] {
        e.f64(x);
    }
    e.u64(r.n_obs)
        .u64(r.n_underdetermined)
        .u64(r.unconstrained_knots as u64)
        .u64(r.workers as u64)
        .f64(r.wall_time_s);
}

fn decode_record(d: &mut Decoder) -> Result<IterationRecord, DecodeError> {
    Ok(IterationRecord {
        iteration: d.u32()?,
        rms_residual: d.f64()?,
        chi2: d.f64()?,
        chi2_before_source: d.f64()?,
        max_source_update: d.f64()?,
        max_attitude_update: d.f64()?,
        max_calibration_update: d.f64()?,
        global_update: d.f64()?,
        n_obs: d.u64()?,
        n_underdetermined: d.u64()?,
        unconstrained_knots: d.u64()? as usize,
        workers: d.u64()? as usize,
        wall_time_s: d.f64()?,
    })
}

fn vector(d: &mut Decoder) -> Result<Vector3<f64>, DecodeError> {
    Ok(Vector3::new(d.f64()?, d.f64()?, d.f64()?))
}

pub fn encode_checkpoint(digest: &[u8; 32], p: &RunProgress) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(MAGIC).u32(CHECKPOINT_VERSION).bytes(digest);
    encode_state(&mut e, &p.state);
    e.u64(p.records.len() as u64);
    for r in &p.records {
        encode_record(&mut e, r);
    }
    p.accel.encode(&mut e);
    match &p.frame {
        None => {
            e.u8(0);
        }
        Some(f) => {
            e.u8(1);
            for x in f.rotation.iter().chain(f.spin.iter()) {
                e.f64(*x);
            }
            e.u64(f.n_anchors as u64);
        }
    }
    let sum = sha256(&e.buf);
    e.bytes(&sum);
    e.buf
}

pub fn decode_checkpoint(bytes: &[u8], digest: &[u8; 32]) -> Result<RunProgress, CliError> {
    let corrupt = |m: &str| CliError::Storage(format!("checkpoint: {m}"));
    if bytes.len() < 32 + MAGIC.len() + 4 + 32 {
        return Err(corrupt("too short"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let mut d = Decoder::new(body);
    let head = |d: &mut Decoder| -> Result<(Vec<u8>, u32, Vec<u8>), DecodeError> {
        Ok((d.take(8)?.to_vec(), d.u32()?, d.take(32)?.to_vec()))
    };
    let (magic, version, stored) = head(&mut d).map_err(|e| corrupt(&e.to_string()))?;
    if magic != MAGIC || version != CHECKPOINT_VERSION {
        return Err(corrupt("unknown format"));
    }
    if stored != digest {
        return Err(corrupt("written for a different configuration"));
    }
    let body = |d: &mut Decoder| -> Result<RunProgress, DecodeError> {
        let state = decode_state(d)?;
        let n = d.u64()? as usize;
        if n > d.remaining() {
            return Err(DecodeError(d.position()));
        }
        let records = (0..n)
            .map(|_| decode_record(d))
            .collect::<Result<Vec<_>, _>>()?;
        let accel = Anderson::decode(d)?;
        let frame = match d.u8()? {
            0 => None,
            1 => Some(FrameCorrection {
                rotation: vector(d)?,
                spin: vector(d)?,
                n_anchors: d.u64()? as usize,
            }),
            _ => return Err(DecodeError(d.position())),
        };
        if d.remaining() != 0 {
            return Err(DecodeError(d.position()));
        }
        Ok(RunProgress {
            state,
            records,
            accel,
            frame,
        })
    };
    body(&mut d).map_err(|e| corrupt(&e.to_string()))
}

pub fn write_checkpoint(path: &Path, digest: &[u8; 32], p: &RunProgress) -> Result<(), CliError> {
    write_atomic(path, &encode_checkpoint(digest, p))?;
    Ok(())
}

/// `None` when no checkpoint was written yet.
pub fn read_checkpoint(path: &Path, digest: &[u8; 32]) -> Result<Option<RunProgress>, CliError> {
    match std::fs::read(path) {
        Ok(bytes) => decode_checkpoint(&bytes, digest).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}
