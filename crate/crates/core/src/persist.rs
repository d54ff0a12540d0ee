//! Versioned little-endian binary container for a [`GlobalMap`].
//!
//! Layout: magic `TSDF++\0`, `u32` version, grid parameters (`f64` voxel size,
//! `u32` block side, `f64` truncation), `u8` mode, `u32` next object id, the global
//! volume (`u64` block count, then per block three `i32` indices and one 17-byte
//! record per voxel), and finally `u32` object count followed by each object's
//! stream (`u32` id, `u8` semantic flag, `u64` block count, blocks of `f64`
//! distance/weight pairs).

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::voxel::{
    BlockGrid, BlockIndex, GlobalMap, GridParams, MapMode, MultiObjectVoxel, ObjectId, ObjectVolume, Slot, TsdfVoxel,
};

pub const MAGIC: &[u8; 7] = b"TSDF++\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt map file: {0}")]
    Corrupt(String),
}

pub fn save_map<W: Write>(map: &GlobalMap, out: &mut W) -> io::Result<()> {
    let params = map.params();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&params.voxel_size.to_le_bytes())?;
    out.write_all(&(params.voxels_per_block_side as u32).to_le_bytes())?;
    out.write_all(&params.truncation_distance.to_le_bytes())?;
    out.write_all(&[match map.mode() {
        MapMode::TsdfPlusPlus => 0u8,
        MapMode::StandardTsdf => 1u8,
    }])?;
    out.write_all(&map.next_object_id().to_le_bytes())?;

    let global = map.global();
    out.write_all(&(global.block_count() as u64).to_le_bytes())?;
    for b in global.sorted_block_indices() {
        write_block_index(out, &b)?;
        for v in global.block(&b).expect("sorted key") {
            let flags = v.active.is_some() as u8 | (v.inactive.is_some() as u8) << 1;
            out.write_all(&[flags])?;
            for slot in [v.active, v.inactive] {
                let s = slot.unwrap_or(Slot::new(ObjectId(0), 0));
                out.write_all(&s.id.0.to_le_bytes())?;
                out.write_all(&s.confidence.to_le_bytes())?;
            }
        }
    }

    out.write_all(&(map.objects().len() as u32).to_le_bytes())?;
    for (id, volume) in map.objects() {
        out.write_all(&id.0.to_le_bytes())?;
        out.write_all(&[volume.is_semantic() as u8])?;
        let grid = volume.grid();
        out.write_all(&(grid.block_count() as u64).to_le_bytes())?;
        for b in grid.sorted_block_indices() {
            write_block_index(out, &b)?;
            for v in grid.block(&b).expect("sorted key") {
                out.write_all(&v.distance.to_le_bytes())?;
                out.write_all(&v.weight.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_map<R: Read>(input: &mut R) -> Result<GlobalMap, PersistError> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let voxel_size = read_f64(input)?;
    let side = read_u32(input)? as usize;
    let truncation = read_f64(input)?;
    let params = GridParams::new(voxel_size, side, truncation).map_err(|e| PersistError::Corrupt(e.to_string()))?;
    let mode = match read_u8(input)? {
        0 => MapMode::TsdfPlusPlus,
        1 => MapMode::StandardTsdf,
        other => return Err(PersistError::Corrupt(format!("unknown map mode tag {other}"))),
    };
    let next_id = read_u32(input)?;
    let per_block = params.voxels_per_block();

    let mut global = BlockGrid::new(params);
    for _ in 0..read_u64(input)? {
        let b = read_block_index(input)?;
        let mut data = Vec::with_capacity(per_block);
        for _ in 0..per_block {
            let flags = read_u8(input)?;
            let mut slots = [None, None];
            for (k, slot) in slots.iter_mut().enumerate() {
                let id = ObjectId(read_u32(input)?);
                let confidence = read_u32(input)?;
                if flags & (1 << k) != 0 {
                    if confidence == 0 {
                        return Err(PersistError::Corrupt(format!("zero confidence in block {b:?}")));
                    }
                    *slot = Some(Slot::new(id, confidence));
                }
            }
            data.push(MultiObjectVoxel {
                active: slots[0],
                inactive: slots[1],
            });
        }
        global.insert_block(b, data.into_boxed_slice());
    }

    let mut objects = BTreeMap::new();
    for _ in 0..read_u32(input)? {
        let id = ObjectId(read_u32(input)?);
        let mut volume = ObjectVolume::new(id, params);
        if read_u8(input)? != 0 {
            volume.mark_semantic();
        }
        for _ in 0..read_u64(input)? {
            let b = read_block_index(input)?;
            let mut data = Vec::with_capacity(per_block);
            for _ in 0..per_block {
                data.push(TsdfVoxel::new(read_f64(input)?, read_f64(input)?));
            }
            volume.grid_mut().insert_block(b, data.into_boxed_slice());
        }
        objects.insert(id, volume);
    }
    if !objects.contains_key(&ObjectId::BACKGROUND) {
        return Err(PersistError::Corrupt("background model missing".into()));
    }
    let map = GlobalMap::from_parts(params, mode, global, objects, next_id);
    map.check_invariants().map_err(PersistError::Corrupt)?;
    Ok(map)
}

fn write_block_index<W: Write>(out: &mut W, b: &BlockIndex) -> io::Result<()> {
    for c in b.0 {
        out.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

fn read_block_index<R: Read>(input: &mut R) -> io::Result<BlockIndex> {
    Ok(BlockIndex([read_i32(input)?, read_i32(input)?, read_i32(input)?]))
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u8<R: Read>(input: &mut R) -> io::Result<u8> {
    Ok(read_array::<1, _>(input)?[0])
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    read_array(input).map(u32::from_le_bytes)
}

fn read_i32<R: Read>(input: &mut R) -> io::Result<i32> {
    read_array(input).map(i32::from_le_bytes)
}

fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    read_array(input).map(u64::from_le_bytes)
}

fn read_f64<R: Read>(input: &mut R) -> io::Result<f64> {
    read_array(input).map(f64::from_le_bytes)
}
