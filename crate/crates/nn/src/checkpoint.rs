//! Binary checkpoint: a free-form config header followed by a named
//! parameter table and, optionally, Adam moments.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! magic "UACK" | version | header_len | header bytes (utf-8)
//! n_params | { name_len | name | ndim | dims... | f64 data } * n_params
//! has_optimizer: u8 | [ step: u64 | beta1 beta2 eps: f64 | m tensors | v tensors ]
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UACK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: String,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    header: &str,
    params: &ParamStore,
    optimizer: Option<&Adam>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, header.len() as u32)?;
    w.write_all(header.as_bytes())?;
    put_u32(w, params.len() as u32)?;
    for (_, name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        put_f64s(w, t.data())?;
    }
    match optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            w.write_all(&[1])?;
            w.write_all(&opt.step.to_le_bytes())?;
            put_f64s(w, &[opt.beta1, opt.beta2, opt.eps])?;
            for t in opt.m.iter().chain(&opt.v) {
                put_f64s(w, t.data())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let hlen = get_u32(r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = String::from_utf8(hbuf).map_err(|e| NnError::Format(format!("header: {e}")))?;
    let n = get_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = get_u32(r)? as usize;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| NnError::Format(format!("name: {e}")))?;
        let ndim = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(r)? as usize);
        }
        let numel = shape.iter().product();
        let data = get_f64s(r, numel)?;
        if params.id(&name).is_some() {
            return Err(NnError::Format(format!("duplicate parameter {name}")));
        }
        params.add(name, Tensor::from_vec(&shape, data));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => {
            let mut sb = [0u8; 8];
            r.read_exact(&mut sb)?;
            let hyper = get_f64s(r, 3)?;
            let mut opt = Adam::new(&params);
            opt.step = u64::from_le_bytes(sb);
            opt.beta1 = hyper[0];
            opt.beta2 = hyper[1];
            opt.eps = hyper[2];
            for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                let data = get_f64s(r, t.numel())?;
                t.data_mut().copy_from_slice(&data);
            }
            Some(opt)
        }
        f => return Err(NnError::Format(format!("bad optimizer flag {f}"))),
    };
    Ok(Checkpoint {
        header,
        params,
        optimizer,
    })
}
