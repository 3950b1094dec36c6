//! Binary solver snapshot: the full [`SolverState`] together with the scan
//! law it was computed for. Floats are stored as raw little-endian bits so a
//! snapshot reloads bitwise.

use std::path::Path;

use super::codec::{sha256, DecodeError, Decoder, Encoder};
use super::{write_atomic, FormatError};
use crate::model::{Ephemeris, SourceParams};
use crate::simulator::ScanLaw;
use crate::solver::{AttitudeModel, CalibrationTable, GlobalParams, SolverState};

const MAGIC: &[u8; 8] = b"AGSTATE\0";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: SolverState,
    pub law: ScanLaw,
}

/// Append the raw bits of `st` to `e`.
pub fn encode_state(e: &mut Encoder, st: &SolverState) {
    e.u32(st.iteration)
        .u64(st.n_primary as u64)
        .u64(st.sources.len() as u64);
    for p in &st.sources {
        for x in [
            p.alpha,
            p.delta,
            p.parallax,
            p.pm_alpha_star,
            p.pm_delta,
            p.radial_velocity,
            p.epoch,
        ] {
            e.f64(x);
        }
    }
    e.f64(st.attitude.start)
        .f64(st.attitude.spacing)
        .f64s(&st.attitude.coeffs);
    e.f64s(&st.calibration.offsets).f64(st.global.g);
}

pub fn decode_state(d: &mut Decoder) -> Result<SolverState, DecodeError> {
    let iteration = d.u32()?;
    let n_primary = d.u64()? as usize;
    let n = d.u64()? as usize;
    if n > d.remaining() / 56 || n_primary > n {
        return Err(DecodeError(d.position()));
    }
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        sources.push(SourceParams {
            alpha: d.f64()?,
            delta: d.f64()?,
            parallax: d.f64()?,
            pm_alpha_star: d.f64()?,
            pm_delta: d.f64()?,
            radial_velocity: d.f64()?,
            epoch: d.f64()?,
        });
    }
    let attitude = AttitudeModel {
        start: d.f64()?,
        spacing: d.f64()?,
        coeffs: d.f64s()?,
    };
    let calibration = CalibrationTable::new(d.f64s()?);
    let global = GlobalParams { g: d.f64()? };
    Ok(SolverState {
        iteration,
        sources,
        n_primary,
        attitude,
        calibration,
        global,
    })
}

fn encode(s: &Snapshot) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(MAGIC).u32(SNAPSHOT_VERSION);
    encode_state(&mut e, &s.state);
    let l = &s.law;
    for x in [
        l.spin_rate,
        l.precession_rate,
        l.solar_aspect,
        l.basic_angle,
        l.mission_start,
        l.mission_end,
        l.across_scan_half_width,
        l.spin_phase0,
        l.precession_phase0,
        l.orbit.radius_au,
        l.orbit.phase_at_ref,
        l.orbit.t_ref,
    ] {
        e.f64(x);
    }
    e.u16(l.calib_phase_buckets);
    let sum = sha256(&e.buf);
    e.bytes(&sum);
    e.buf
}

pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<(), FormatError> {
    write_atomic(path, &encode(snapshot))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, FormatError> {
    let bytes = std::fs::read(path)?;
    let corrupt = |detail: String| FormatError::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    if bytes.len() < 32 {
        return Err(corrupt("too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != sum {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut d = Decoder::new(body);
    let run = |d: &mut Decoder| -> Result<Snapshot, DecodeError> {
        if d.take(8)? != MAGIC {
            return Err(DecodeError(0));
        }
        if d.u32()? != SNAPSHOT_VERSION {
            return Err(DecodeError(8));
        }
        let state = decode_state(d)?;
        let mut v = [0.0; 12];
        for x in v.iter_mut() {
            *x = d.f64()?;
        }
        let calib_phase_buckets = d.u16()?;
        if d.remaining() != 0 {
            return Err(DecodeError(d.position()));
        }
        Ok(Snapshot {
            state,
            law: ScanLaw {
                spin_rate: v[0],
                precession_rate: v[1],
                solar_aspect: v[2],
                basic_angle: v[3],
                mission_start: v[4],
                mission_end: v[5],
                across_scan_half_width: v[6],
                spin_phase0: v[7],
                precession_phase0: v[8],
                calib_phase_buckets,
                orbit: Ephemeris {
                    radius_au: v[9],
                    phase_at_ref: v[10],
                    t_ref: v[11],
                },
            },
        })
    };
    run(&mut d).map_err(|e| corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::TruthCatalog;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let mut att = AttitudeModel::zeros(0.0, 10.0, 0.25);
        att.coeffs[3] = 1.234e-7;
        att.coeffs[4] = -0.0;
        let snap = Snapshot {
            state: SolverState {
                iteration: 7,
                sources: TruthCatalog::generate(20, 3.0, 1).sources,
                n_primary: 10,
                attitude: att,
                calibration: CalibrationTable::new(vec![1e-9, -1e-9]),
                global: GlobalParams { g: 3e-5 },
            },
            law: ScanLaw::default(),
        };
        write_snapshot(&p, &snap).unwrap();
        let back = read_snapshot(&p).unwrap();
        assert_eq!(back, snap);
        assert!(back.state.attitude.coeffs[4].is_sign_negative());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(read_snapshot(&p).is_err());
    }
}
