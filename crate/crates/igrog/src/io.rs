//! Binary array format: a `.carr` payload of interleaved (real, imag)
//! little-endian values plus a JSON sidecar header. Round trips are bit-exact
//! for both precisions.

use crate::{ComplexArray, Error, Result};
use ndarray::IxDyn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Element precision on disk. Computation is always double precision; `C64`
/// (f32 pairs) exists for interchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    C64,
    C128,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    endian: String,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let carr = if path.extension().map(|e| e == "carr").unwrap_or(false) {
        path.to_path_buf()
    } else {
        path.with_extension("carr")
    };
    let json = carr.with_extension("json");
    (carr, json)
}

/// Write `arr` to `<path>.carr` with its `<path>.json` sidecar.
pub fn write_array(path: impl AsRef<Path>, arr: &ComplexArray, precision: Precision) -> Result<()> {
    let (carr, json) = paths(path.as_ref());
    let header = Header {
        shape: arr.shape().to_vec(),
        dtype: match precision {
            Precision::C64 => "c64".into(),
            Precision::C128 => "c128".into(),
        },
        order: "row-major".into(),
        endian: "little".into(),
    };
    let hdr = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    fs::write(&json, hdr)?;

    let mut payload = Vec::with_capacity(arr.len() * 2 * if precision == Precision::C64 { 4 } else { 8 });
    // Standard layout iteration order equals row-major logical order.
    for v in arr.iter() {
        match precision {
            Precision::C64 => {
                payload.extend_from_slice(&(v.re as f32).to_le_bytes());
                payload.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
            Precision::C128 => {
                payload.extend_from_slice(&v.re.to_le_bytes());
                payload.extend_from_slice(&v.im.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(&carr)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read an array written by [`write_array`]. Single-precision payloads are
/// widened to doubles.
pub fn read_array(path: impl AsRef<Path>) -> Result<ComplexArray> {
    let (carr, json) = paths(path.as_ref());
    let hdr_text = fs::read_to_string(&json)?;
    let header: Header =
        serde_json::from_str(&hdr_text).map_err(|e| Error::Format(format!("header parse: {e}")))?;
    if header.order != "row-major" {
        return Err(Error::Format(format!("unsupported order {:?}", header.order)));
    }
    if header.endian != "little" {
        return Err(Error::Format(format!("unsupported endianness {:?}", header.endian)));
    }
    let elem_bytes = match header.dtype.as_str() {
        "c64" => 8,
        "c128" => 16,
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    };
    let count: usize = header.shape.iter().product();

    let mut payload = Vec::new();
    fs::File::open(&carr)?.read_to_end(&mut payload)?;
    if payload.len() != count * elem_bytes {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * elem_bytes
        )));
    }

    let mut data = Vec::with_capacity(count);
    match header.dtype.as_str() {
        "c64" => {
            for ch in payload.chunks_exact(8) {
                let re = f32::from_le_bytes(ch[0..4].try_into().unwrap()) as f64;
                let im = f32::from_le_bytes(ch[4..8].try_into().unwrap()) as f64;
                data.push(Complex64::new(re, im));
            }
        }
        _ => {
            for ch in payload.chunks_exact(16) {
                let re = f64::from_le_bytes(ch[0..8].try_into().unwrap());
                let im = f64::from_le_bytes(ch[8..16].try_into().unwrap());
                data.push(Complex64::new(re, im));
            }
        }
    }
    ComplexArray::from_shape_vec(IxDyn(&header.shape), data)
        .map_err(|e| Error::Format(format!("shape error: {e}")))
}

/// Convenience: store a real vector as a complex array (imag = 0).
pub fn write_real_vec(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let arr = ComplexArray::from_shape_vec(
        IxDyn(&[v.len()]),
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
    )
    .unwrap();
    write_array(path, &arr, Precision::C128)
}

pub fn read_real_vec(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let arr = read_array(path)?;
    Ok(arr.iter().map(|v| v.re).collect())
}


/// Persist a trajectory: coordinates, times and readout ids in the array
/// format plus a small JSON descriptor.
pub fn save_trajectory(dir: &Path, traj: &crate::array::Trajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = traj.num_samples();
    let d = traj.dim();
    let coords = ComplexArray::from_shape_vec(
        IxDyn(&[m, d]),
        traj.coords.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
    )
    .unwrap();
    write_array(dir.join("coords.carr"), &coords, Precision::C128)?;
    write_real_vec(dir.join("times.carr"), &traj.times)?;
    write_real_vec(
        dir.join("readouts.carr"),
        &traj.readout_id.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )?;
    let meta = serde_json::json!({ "accel": traj.accel });
    fs::write(dir.join("traj.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<crate::array::Trajectory> {
    let coords_c = read_array(dir.join("coords.carr"))?;
    let m = coords_c.shape()[0];
    let d = coords_c.shape()[1];
    let coords = ndarray::Array2::from_shape_fn((m, d), |(i, a)| coords_c[[i, a]].re);
    let times = read_real_vec(dir.join("times.carr"))?;
    let readout_id: Vec<usize> = read_real_vec(dir.join("readouts.carr"))?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let mut traj = crate::array::Trajectory::new(coords, times, readout_id)?;
    if let Ok(text) = fs::read_to_string(dir.join("traj.json")) {
        if let Ok(meta) = serde_json::from_str::<serde_json::Value>(&text) {
            traj.accel = meta["accel"].as_f64().unwrap_or(1.0);
        }
    }
    Ok(traj)
}

/// Persist a calibration block (all echoes + echo times).
pub fn save_calibration(dir: &Path, cal: &crate::array::Calibration) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (e, k) in cal.kdata.iter().enumerate() {
        write_array(dir.join(format!("echo{e}.carr")), k, Precision::C128)?;
    }
    let meta = serde_json::json!({
        "te": cal.te,
        "dim": cal.grid.dim,
        "extent": cal.grid.extent,
        "fov": cal.grid.fov,
    });
    fs::write(dir.join("cal.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

pub fn load_calibration(dir: &Path) -> Result<crate::array::Calibration> {
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("cal.json"))?)
            .map_err(|e| Error::Format(format!("cal.json: {e}")))?;
    let te: Vec<f64> = meta["te"]
        .as_array()
        .ok_or_else(|| Error::Format("cal.json missing te".into()))?
        .iter()
        .filter_map(|v| v.as_f64())
        .collect();
    let grid = crate::array::Grid {
        dim: meta["dim"].as_u64().unwrap_or(2) as usize,
        extent: meta["extent"].as_u64().unwrap_or(32) as usize,
        fov: meta["fov"].as_f64().unwrap_or(1.0),
    };
    let kdata: Vec<ComplexArray> = (0..te.len())
        .map(|e| read_array(dir.join(format!("echo{e}.carr"))))
        .collect::<Result<_>>()?;
    crate::array::Calibration::new(grid, kdata, te)
}
