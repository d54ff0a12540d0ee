//! Voxel-hashed block storage for the global map volume and per-object TSDF volumes.
//!
//! All volumes share one [`GridParams`], so a [`GridIndex`] addresses the same
//! spatial cell in the global volume and in every object volume.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::{BTreeMap, HashMap};
use std::hash::BuildHasherDefault;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("invalid grid parameters: {0}")]
    InvalidParams(String),
    #[error("failed to allocate voxel block {0:?}")]
    Allocation(BlockIndex),
    #[error("unknown object id {0}")]
    UnknownObject(ObjectId),
    #[error("the background model (id 0) cannot be moved")]
    BackgroundImmovable,
    #[error("image size mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub voxel_size: f64,
    pub voxels_per_block_side: usize,
    pub truncation_distance: f64,
}

impl Default for GridParams {
    /// 1 cm voxels, 16³ voxel blocks, truncation at ten voxels.
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            voxels_per_block_side: 16,
            truncation_distance: 0.1,
        }
    }
}

impl GridParams {
    pub fn new(voxel_size: f64, voxels_per_block_side: usize, truncation_distance: f64) -> Result<Self, MapError> {
        let params = Self {
            voxel_size,
            voxels_per_block_side,
            truncation_distance,
        };
        params.validate()?;
        Ok(params)
    }

    /// Truncation expressed as a multiple of the voxel size.
    pub fn with_truncation_multiple(voxel_size: f64, multiple: f64) -> Result<Self, MapError> {
        Self::new(voxel_size, 16, voxel_size * multiple)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(MapError::InvalidParams(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if !(self.truncation_distance > 0.0 && self.truncation_distance.is_finite()) {
            return Err(MapError::InvalidParams(format!(
                "truncation_distance must be positive, got {}",
                self.truncation_distance
            )));
        }
        if self.voxels_per_block_side == 0 || self.voxels_per_block_side > 256 {
            return Err(MapError::InvalidParams(format!(
                "voxels_per_block_side must be in 1..=256, got {}",
                self.voxels_per_block_side
            )));
        }
        Ok(())
    }

    pub fn voxels_per_block(&self) -> usize {
        self.voxels_per_block_side.pow(3)
    }

    pub fn block_size(&self) -> f64 {
        self.voxel_size * self.voxels_per_block_side as f64
    }

    /// Floor-based binning: `g·voxel_size ≤ p < (g+1)·voxel_size` per axis.
    pub fn world_to_grid(&self, p: &Vec3) -> GridIndex {
        let q = p / self.voxel_size;
        GridIndex::new(q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
    }

    /// Center of voxel `g` in meters.
    pub fn grid_to_world(&self, g: &GridIndex) -> Vec3 {
        Vec3::new(g.x as f64 + 0.5, g.y as f64 + 0.5, g.z as f64 + 0.5) * self.voxel_size
    }

    pub fn block_of(&self, g: &GridIndex) -> BlockIndex {
        let n = self.voxels_per_block_side as i64;
        BlockIndex([g.x.div_euclid(n) as i32, g.y.div_euclid(n) as i32, g.z.div_euclid(n) as i32])
    }

    pub fn local_offset(&self, g: &GridIndex) -> usize {
        let n = self.voxels_per_block_side as i64;
        let (x, y, z) = (g.x.rem_euclid(n), g.y.rem_euclid(n), g.z.rem_euclid(n));
        (x + n * (y + n * z)) as usize
    }

    /// Global index of the `offset`-th voxel of block `b`.
    pub fn voxel_in_block(&self, b: &BlockIndex, offset: usize) -> GridIndex {
        let n = self.voxels_per_block_side;
        let (x, y, z) = (offset % n, (offset / n) % n, offset / (n * n));
        let n = n as i64;
        GridIndex::new(b.0[0] as i64 * n + x as i64, b.0[1] as i64 * n + y as i64, b.0[2] as i64 * n + z as i64)
    }

    /// World point to (voxel, block) pair.
    pub fn locate(&self, p: &Vec3) -> (GridIndex, BlockIndex) {
        let g = self.world_to_grid(p);
        (g, self.block_of(&g))
    }
}

/// Integer voxel coordinate in the shared map grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl GridIndex {
    pub const fn new(x: i64, y: i64, z: i64) -> Self {
        Self { x, y, z }
    }

    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

/// Index of a cubic block of `voxels_per_block_side³` voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockIndex(pub [i32; 3]);

/// Identifier of a mapped object model. Id 0 is the static background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u32);

impl ObjectId {
    pub const BACKGROUND: ObjectId = ObjectId(0);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TsdfVoxel {
    pub distance: f64,
    pub weight: f64,
}

impl TsdfVoxel {
    pub fn new(distance: f64, weight: f64) -> Self {
        Self { distance, weight }
    }

    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }
}

/// Object reference stored in one layer of a global voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub id: ObjectId,
    pub confidence: u32,
}

impl Slot {
    pub fn new(id: ObjectId, confidence: u32) -> Self {
        Self { id, confidence }
    }
}

/// Outcome of [`MultiObjectVoxel::assign_layer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDecision {
    AlreadyActive,
    AlreadyInactive,
    ActivatedFromInactive,
    PlacedInFreeSlot,
    EvictedInactive(ObjectId),
    Rejected,
}

/// Outcome of [`MultiObjectVoxel::activate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Activation {
    /// Former active object now stored in the inactive slot.
    pub demoted: Option<ObjectId>,
    /// Object that lost its reference at this voxel.
    pub dropped: Option<ObjectId>,
}

/// Outcome of [`MultiObjectVoxel::update_confidence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfidenceUpdate {
    /// Empty active slot taken by the incoming id with confidence 1.
    Initialized,
    /// Incoming id moved up from the inactive slot into an empty active slot.
    Promoted,
    Reinforced,
    Weakened,
    /// Confidence reached zero and the incoming id became active.
    Swapped { former: ObjectId, activation: Activation },
}

/// Per-cell record of the global map volume: at most two object references.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MultiObjectVoxel {
    pub active: Option<Slot>,
    pub inactive: Option<Slot>,
}

impl MultiObjectVoxel {
    pub fn is_empty(&self) -> bool {
        self.active.is_none() && self.inactive.is_none()
    }

    pub fn active_id(&self) -> Option<ObjectId> {
        self.active.map(|s| s.id)
    }

    pub fn inactive_id(&self) -> Option<ObjectId> {
        self.inactive.map(|s| s.id)
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.active_id() == Some(id) || self.inactive_id() == Some(id)
    }

    pub fn occupied_slots(&self) -> usize {
        self.active.is_some() as usize + self.inactive.is_some() as usize
    }

    /// Ensures `id` holds a layer at this voxel.
    ///
    /// The active slot is never evicted. A full voxel gives up its inactive
    /// occupant only when that occupant's confidence is at most 1 and it is not
    /// `pinned`; a pinned newcomer always takes the inactive slot.
    pub fn assign_layer(&mut self, id: ObjectId, pinned: impl Fn(ObjectId) -> bool) -> LayerDecision {
        if self.active_id() == Some(id) {
            return LayerDecision::AlreadyActive;
        }
        if self.inactive_id() == Some(id) {
            if self.active.is_none() {
                self.active = self.inactive.take();
                return LayerDecision::ActivatedFromInactive;
            }
            return LayerDecision::AlreadyInactive;
        }
        if self.active.is_none() {
            self.active = Some(Slot::new(id, 1));
            return LayerDecision::PlacedInFreeSlot;
        }
        match self.inactive {
            None => {
                self.inactive = Some(Slot::new(id, 1));
                LayerDecision::PlacedInFreeSlot
            }
            Some(incumbent) => {
                if !pinned(incumbent.id) && (incumbent.confidence <= 1 || pinned(id)) {
                    self.inactive = Some(Slot::new(id, 1));
                    LayerDecision::EvictedInactive(incumbent.id)
                } else {
                    LayerDecision::Rejected
                }
            }
        }
    }

    /// Makes `id` the active object with confidence 1 and demotes the incumbent.
    ///
    /// With `single_layer` the incumbent is dropped instead of demoted. Otherwise it
    /// keeps its confidence in the inactive slot if that slot is free, or if the
    /// current inactive occupant loses under the eviction rule of
    /// [`assign_layer`](Self::assign_layer).
    pub fn activate(&mut self, id: ObjectId, pinned: impl Fn(ObjectId) -> bool, single_layer: bool) -> Activation {
        if self.active_id() == Some(id) {
            if let Some(slot) = self.active.as_mut() {
                slot.confidence = 1;
            }
            return Activation::default();
        }
        if self.inactive_id() == Some(id) {
            self.inactive = None;
        }
        let incumbent = self.active.replace(Slot::new(id, 1));
        let Some(incumbent) = incumbent else {
            return Activation::default();
        };
        if single_layer {
            return Activation {
                demoted: None,
                dropped: Some(incumbent.id),
            };
        }
        match self.inactive {
            None => {
                self.inactive = Some(incumbent);
                Activation {
                    demoted: Some(incumbent.id),
                    dropped: None,
                }
            }
            Some(occupant) => {
                let replace = !pinned(occupant.id) && (occupant.confidence <= 1 || pinned(incumbent.id));
                if replace {
                    self.inactive = Some(incumbent);
                    Activation {
                        demoted: Some(incumbent.id),
                        dropped: Some(occupant.id),
                    }
                } else {
                    Activation {
                        demoted: None,
                        dropped: Some(incumbent.id),
                    }
                }
            }
        }
    }

    /// Confidence vote of one observation labelled `incoming`.
    ///
    /// Agreement with the active object adds one, disagreement subtracts one; at
    /// zero the incoming object becomes active with confidence re-initialized to one.
    pub fn update_confidence(
        &mut self,
        incoming: ObjectId,
        pinned: impl Fn(ObjectId) -> bool,
        single_layer: bool,
    ) -> ConfidenceUpdate {
        match self.active.as_mut() {
            None => {
                if self.inactive_id() == Some(incoming) {
                    let mut slot = self.inactive.take().expect("checked above");
                    slot.confidence += 1;
                    self.active = Some(slot);
                    ConfidenceUpdate::Promoted
                } else {
                    self.active = Some(Slot::new(incoming, 1));
                    ConfidenceUpdate::Initialized
                }
            }
            Some(slot) if slot.id == incoming => {
                slot.confidence = slot.confidence.saturating_add(1);
                ConfidenceUpdate::Reinforced
            }
            Some(slot) => {
                slot.confidence -= 1;
                if slot.confidence > 0 {
                    return ConfidenceUpdate::Weakened;
                }
                let former = slot.id;
                // a demoted layer re-enters with the weakest non-zero score
                slot.confidence = 1;
                let activation = self.activate(incoming, pinned, single_layer);
                ConfidenceUpdate::Swapped { former, activation }
            }
        }
    }

    /// Removes every reference to `id`, promoting the inactive occupant when the
    /// active slot is vacated. Returns true when anything changed.
    pub fn deactivate(&mut self, id: ObjectId) -> bool {
        let mut changed = false;
        if self.inactive_id() == Some(id) {
            self.inactive = None;
            changed = true;
        }
        if self.active_id() == Some(id) {
            self.active = self.inactive.take();
            changed = true;
        }
        changed
    }
}

type BlockHasher = BuildHasherDefault<DefaultHasher>;

/// Sparse grid of fixed-size voxel blocks allocated on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid<T> {
    params: GridParams,
    blocks: HashMap<BlockIndex, Box<[T]>, BlockHasher>,
}

impl<T: Clone + Default> BlockGrid<T> {
    pub fn new(params: GridParams) -> Self {
        Self {
            params,
            blocks: HashMap::default(),
        }
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn contains_block(&self, b: &BlockIndex) -> bool {
        self.blocks.contains_key(b)
    }

    pub fn block(&self, b: &BlockIndex) -> Option<&[T]> {
        self.blocks.get(b).map(|b| &**b)
    }

    pub fn block_mut(&mut self, b: &BlockIndex) -> Option<&mut [T]> {
        self.blocks.get_mut(b).map(|b| &mut **b)
    }

    pub fn get(&self, g: &GridIndex) -> Option<&T> {
        let block = self.blocks.get(&self.params.block_of(g))?;
        Some(&block[self.params.local_offset(g)])
    }

    pub fn get_mut(&mut self, g: &GridIndex) -> Option<&mut T> {
        let offset = self.params.local_offset(g);
        let block = self.blocks.get_mut(&self.params.block_of(g))?;
        Some(&mut block[offset])
    }

    pub fn allocate_block(&mut self, b: BlockIndex) -> Result<&mut [T], MapError> {
        let n = self.params.voxels_per_block();
        if !self.blocks.contains_key(&b) {
            self.blocks.try_reserve(1).map_err(|_| MapError::Allocation(b))?;
        }
        match self.blocks.entry(b) {
            Entry::Occupied(e) => Ok(&mut **e.into_mut()),
            Entry::Vacant(e) => {
                let mut data: Vec<T> = Vec::new();
                data.try_reserve_exact(n).map_err(|_| MapError::Allocation(b))?;
                data.resize(n, T::default());
                Ok(&mut **e.insert(data.into_boxed_slice()))
            }
        }
    }

    pub fn get_or_allocate(&mut self, g: &GridIndex) -> Result<&mut T, MapError> {
        let offset = self.params.local_offset(g);
        let block = self.allocate_block(self.params.block_of(g))?;
        Ok(&mut block[offset])
    }

    pub fn insert_block(&mut self, b: BlockIndex, data: Box<[T]>) {
        debug_assert_eq!(data.len(), self.params.voxels_per_block());
        self.blocks.insert(b, data);
    }

    pub fn remove_block(&mut self, b: &BlockIndex) -> Option<Box<[T]>> {
        self.blocks.remove(b)
    }

    /// Allocated block indices in ascending order.
    pub fn sorted_block_indices(&self) -> Vec<BlockIndex> {
        let mut keys: Vec<BlockIndex> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Every allocated voxel exactly once, in ascending block order.
    pub fn iter(&self) -> impl Iterator<Item = (GridIndex, &T)> + '_ {
        self.sorted_block_indices().into_iter().flat_map(move |b| {
            let block = &self.blocks[&b];
            block
                .iter()
                .enumerate()
                .map(move |(i, v)| (self.params.voxel_in_block(&b, i), v))
        })
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(GridIndex, &mut T)) {
        for b in self.sorted_block_indices() {
            let block = self.blocks.get_mut(&b).expect("key from map");
            for (i, v) in block.iter_mut().enumerate() {
                f(self.params.voxel_in_block(&b, i), v);
            }
        }
    }

    /// Inclusive min/max block indices, `None` when empty.
    pub fn block_bounds(&self) -> Option<(BlockIndex, BlockIndex)> {
        let mut it = self.blocks.keys();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first.0, first.0);
        for b in it {
            for k in 0..3 {
                lo[k] = lo[k].min(b.0[k]);
                hi[k] = hi[k].max(b.0[k]);
            }
        }
        Some((BlockIndex(lo), BlockIndex(hi)))
    }
}

/// Sparse TSDF of one mapped object, expressed in the global frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectVolume {
    id: ObjectId,
    semantic: bool,
    grid: BlockGrid<TsdfVoxel>,
}

impl ObjectVolume {
    pub fn new(id: ObjectId, params: GridParams) -> Self {
        Self {
            id,
            semantic: false,
            grid: BlockGrid::new(params),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.id
    }

    /// Whether the object was ever matched to a detector mask.
    pub fn is_semantic(&self) -> bool {
        self.semantic
    }

    pub fn mark_semantic(&mut self) {
        self.semantic = true;
    }

    pub fn params(&self) -> &GridParams {
        self.grid.params()
    }

    pub fn grid(&self) -> &BlockGrid<TsdfVoxel> {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut BlockGrid<TsdfVoxel> {
        &mut self.grid
    }

    pub(crate) fn replace_grid(&mut self, grid: BlockGrid<TsdfVoxel>) {
        self.grid = grid;
    }

    pub fn voxel(&self, g: &GridIndex) -> Option<&TsdfVoxel> {
        self.grid.get(g)
    }

    pub fn weight_at(&self, g: &GridIndex) -> f64 {
        self.grid.get(g).map_or(0.0, |v| v.weight)
    }

    pub fn set_voxel(&mut self, g: &GridIndex, v: TsdfVoxel) -> Result<(), MapError> {
        *self.grid.get_or_allocate(g)? = v;
        Ok(())
    }

    pub fn observed_voxel_count(&self) -> usize {
        self.grid.iter().filter(|(_, v)| v.is_observed()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.iter().all(|(_, v)| !v.is_observed())
    }
}

/// Which volumetric representation a [`GlobalMap`] maintains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Two object layers per voxel (active + inactive).
    TsdfPlusPlus,
    /// One surface per voxel; a displaced surface is overwritten.
    StandardTsdf,
}

impl MapMode {
    pub fn is_single_layer(self) -> bool {
        self == MapMode::StandardTsdf
    }

    pub fn label(self) -> &'static str {
        match self {
            MapMode::TsdfPlusPlus => "tsdfpp",
            MapMode::StandardTsdf => "standard",
        }
    }
}

impl std::str::FromStr for MapMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsdfpp" | "tsdf_plus_plus" => Ok(MapMode::TsdfPlusPlus),
            "standard" | "standard_tsdf" => Ok(MapMode::StandardTsdf),
            other => Err(format!("unknown map mode '{other}' (expected tsdfpp or standard)")),
        }
    }
}

/// The single scene container: a global volume of layered object references
/// indexing one [`ObjectVolume`] per mapped object.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMap {
    params: GridParams,
    mode: MapMode,
    global: BlockGrid<MultiObjectVoxel>,
    objects: BTreeMap<ObjectId, ObjectVolume>,
    next_id: u32,
}

impl GlobalMap {
    pub fn new(params: GridParams, mode: MapMode) -> Self {
        let mut objects = BTreeMap::new();
        objects.insert(ObjectId::BACKGROUND, ObjectVolume::new(ObjectId::BACKGROUND, params));
        Self {
            params,
            mode,
            global: BlockGrid::new(params),
            objects,
            next_id: 1,
        }
    }

    pub(crate) fn from_parts(
        params: GridParams,
        mode: MapMode,
        global: BlockGrid<MultiObjectVoxel>,
        objects: BTreeMap<ObjectId, ObjectVolume>,
        next_id: u32,
    ) -> Self {
        Self {
            params,
            mode,
            global,
            objects,
            next_id,
        }
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn mode(&self) -> MapMode {
        self.mode
    }

    pub fn next_object_id(&self) -> u32 {
        self.next_id
    }

    pub fn global(&self) -> &BlockGrid<MultiObjectVoxel> {
        &self.global
    }

    pub fn global_mut(&mut self) -> &mut BlockGrid<MultiObjectVoxel> {
        &mut self.global
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ObjectVolume> {
        &self.objects
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectVolume> {
        self.objects.get(&id)
    }

    pub fn object_mut(&mut self, id: ObjectId) -> Option<&mut ObjectVolume> {
        self.objects.get_mut(&id)
    }

    pub fn background(&self) -> &ObjectVolume {
        &self.objects[&ObjectId::BACKGROUND]
    }

    pub(crate) fn split_mut(&mut self) -> (&mut BlockGrid<MultiObjectVoxel>, &mut BTreeMap<ObjectId, ObjectVolume>) {
        (&mut self.global, &mut self.objects)
    }

    /// Registers a new object model. Ids increase monotonically and are never reused.
    pub fn allocate_object(&mut self, semantic: bool) -> ObjectId {
        let id = ObjectId(self.next_id);
        self.next_id += 1;
        let mut volume = ObjectVolume::new(id, self.params);
        if semantic {
            volume.mark_semantic();
        }
        self.objects.insert(id, volume);
        id
    }

    pub fn voxel(&self, g: &GridIndex) -> Option<&MultiObjectVoxel> {
        self.global.get(g)
    }

    pub fn get_or_allocate_voxel(&mut self, g: &GridIndex) -> Result<&mut MultiObjectVoxel, MapError> {
        self.global.get_or_allocate(g)
    }

    /// Places `id` in a layer at `g` under the eviction rule.
    pub fn assign_layer(&mut self, g: &GridIndex, id: ObjectId) -> Result<LayerDecision, MapError> {
        if !self.objects.contains_key(&id) {
            return Err(MapError::UnknownObject(id));
        }
        let background = &self.objects[&ObjectId::BACKGROUND];
        let voxel = self.global.get_or_allocate(g)?;
        Ok(voxel.assign_layer(id, |o| is_pinned(background, g, o)))
    }

    /// Total allocated blocks across the global volume and every object volume.
    pub fn allocated_blocks(&self) -> usize {
        self.global.block_count() + self.objects.values().map(|o| o.grid().block_count()).sum::<usize>()
    }

    /// Checks the cross-volume invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (g, v) in self.global.iter() {
            if v.occupied_slots() > 2 {
                return Err(format!("voxel {g:?} holds more than two layers"));
            }
            if let (Some(a), Some(i)) = (v.active, v.inactive) {
                if a.id == i.id {
                    return Err(format!("voxel {g:?} lists {} in both layers", a.id));
                }
            }
            if self.mode.is_single_layer() && v.inactive.is_some() {
                return Err(format!("voxel {g:?} has an inactive layer in single-layer mode"));
            }
            for slot in [v.active, v.inactive].into_iter().flatten() {
                if slot.confidence == 0 {
                    return Err(format!("voxel {g:?} stores zero confidence for {}", slot.id));
                }
                if !self.objects.contains_key(&slot.id) {
                    return Err(format!("voxel {g:?} references missing object {}", slot.id));
                }
            }
        }
        for (id, volume) in &self.objects {
            for (g, v) in volume.grid().iter() {
                if v.is_observed() && self.global.get(&g).is_none() {
                    return Err(format!("object {id} stores voxel {g:?} outside the global volume"));
                }
                if v.is_observed() && v.distance.abs() > self.params.truncation_distance * (1.0 + 1e-12) {
                    return Err(format!("object {id} voxel {g:?} exceeds truncation: {}", v.distance));
                }
            }
        }
        Ok(())
    }
}

/// The background is never evicted from a voxel where it has been observed.
pub(crate) fn is_pinned(background: &ObjectVolume, g: &GridIndex, id: ObjectId) -> bool {
    id.is_background() && background.weight_at(g) > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: ObjectId = ObjectId(1);
    const B: ObjectId = ObjectId(2);
    const C: ObjectId = ObjectId(3);

    fn never(_: ObjectId) -> bool {
        false
    }

    #[test]
    fn world_to_grid_floor_binning() {
        let p = GridParams::default();
        assert_eq!(p.world_to_grid(&Vec3::zeros()), GridIndex::new(0, 0, 0));
        assert_eq!(p.world_to_grid(&Vec3::new(0.015, -0.005, 0.02)), GridIndex::new(1, -1, 2));
    }

    #[test]
    fn block_and_local_offsets_roundtrip() {
        let p = GridParams::default();
        for g in [GridIndex::new(-1, -16, -17), GridIndex::new(15, 16, 0), GridIndex::new(-33, 40, 7)] {
            let b = p.block_of(&g);
            assert_eq!(p.voxel_in_block(&b, p.local_offset(&g)), g);
        }
        assert_eq!(p.block_of(&GridIndex::new(-1, 0, 16)), BlockIndex([-1, 0, 1]));
    }

    #[test]
    fn params_validation() {
        assert!(GridParams::new(0.0, 16, 0.1).is_err());
        assert!(GridParams::new(0.01, 0, 0.1).is_err());
        assert!(GridParams::new(0.01, 16, -0.1).is_err());
        let p = GridParams::with_truncation_multiple(0.01, 10.0).unwrap();
        assert!((p.truncation_distance - 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn grid_world_roundtrip(x in -100_000i64..100_000, y in -100_000i64..100_000, z in -100_000i64..100_000) {
            let p = GridParams::default();
            let g = GridIndex::new(x, y, z);
            prop_assert_eq!(p.world_to_grid(&p.grid_to_world(&g)), g);
        }

        #[test]
        fn binning_brackets_point(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
            let p = GridParams::default();
            let pt = Vec3::new(x, y, z);
            let g = p.world_to_grid(&pt);
            let q = pt / p.voxel_size;
            for (gi, qi) in [(g.x, q.x), (g.y, q.y), (g.z, q.z)] {
                prop_assert!(gi as f64 <= qi && qi < gi as f64 + 1.0);
            }
        }
    }

    #[test]
    fn allocation_is_lazy_and_idempotent() {
        let mut map = GlobalMap::new(GridParams::default(), MapMode::TsdfPlusPlus);
        let g = GridIndex::new(5, 5, 5);
        let v = map.get_or_allocate_voxel(&g).unwrap();
        assert!(v.is_empty());
        v.active = Some(Slot::new(ObjectId::BACKGROUND, 1));
        assert_eq!(map.global().block_count(), 1);
        let again = map.get_or_allocate_voxel(&g).unwrap();
        assert_eq!(again.active_id(), Some(ObjectId::BACKGROUND));
        assert_eq!(map.global().block_count(), 1);
    }

    #[test]
    fn many_allocations_count_distinct_blocks() {
        let mut grid: BlockGrid<MultiObjectVoxel> = BlockGrid::new(GridParams::default());
        let mut distinct = std::collections::HashSet::new();
        // 10⁶ voxel touches spread over a 10×10×10 block region
        let mut state = 0x2545F4914F6CDD1Du64;
        for _ in 0..1_000_000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let g = GridIndex::new(
                (state % 160) as i64 - 80,
                ((state >> 20) % 160) as i64 - 80,
                ((state >> 40) % 160) as i64 - 80,
            );
            distinct.insert(grid.params().block_of(&g));
            grid.get_or_allocate(&g).unwrap();
        }
        assert_eq!(grid.block_count(), distinct.len());
        assert_eq!(distinct.len(), 1000);
    }

    #[test]
    fn iteration_visits_each_voxel_once() {
        let mut vol = ObjectVolume::new(A, GridParams::default());
        let coords = [GridIndex::new(0, 0, 0), GridIndex::new(-1, 3, 40), GridIndex::new(17, -17, 2)];
        for (i, g) in coords.iter().enumerate() {
            vol.set_voxel(g, TsdfVoxel::new(0.0, i as f64 + 1.0)).unwrap();
        }
        let seen: Vec<GridIndex> = vol.grid().iter().filter(|(_, v)| v.is_observed()).map(|(g, _)| g).collect();
        assert_eq!(seen.len(), 3);
        let unique: std::collections::HashSet<_> = vol.grid().iter().map(|(g, _)| g).collect();
        assert_eq!(unique.len(), vol.grid().block_count() * 4096);
        for g in coords {
            assert!(seen.contains(&g));
        }
    }

    #[test]
    fn assign_free_slot() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 3)),
            inactive: None,
        };
        assert_eq!(v.assign_layer(B, never), LayerDecision::PlacedInFreeSlot);
        assert_eq!(v.inactive, Some(Slot::new(B, 1)));
    }

    #[test]
    fn assign_existing_is_noop() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 3)),
            inactive: Some(Slot::new(B, 2)),
        };
        let before = v;
        assert_eq!(v.assign_layer(B, never), LayerDecision::AlreadyInactive);
        assert_eq!(v.assign_layer(A, never), LayerDecision::AlreadyActive);
        assert_eq!(v, before);
    }

    #[test]
    fn assign_promotes_into_empty_active() {
        let mut v = MultiObjectVoxel {
            active: None,
            inactive: Some(Slot::new(B, 2)),
        };
        assert_eq!(v.assign_layer(B, never), LayerDecision::ActivatedFromInactive);
        assert_eq!(v.active, Some(Slot::new(B, 2)));
        assert_eq!(v.inactive, None);
    }

    #[test]
    fn assign_evicts_weak_inactive() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 5)),
            inactive: Some(Slot::new(B, 1)),
        };
        assert_eq!(v.assign_layer(C, never), LayerDecision::EvictedInactive(B));
        assert_eq!(v.active, Some(Slot::new(A, 5)));
        assert_eq!(v.inactive, Some(Slot::new(C, 1)));
    }

    #[test]
    fn assign_rejects_against_established_inactive() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 5)),
            inactive: Some(Slot::new(B, 2)),
        };
        assert_eq!(v.assign_layer(C, never), LayerDecision::Rejected);
        assert_eq!(v.inactive, Some(Slot::new(B, 2)));
    }

    #[test]
    fn pinned_background_is_not_evicted() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 5)),
            inactive: Some(Slot::new(ObjectId::BACKGROUND, 1)),
        };
        let pinned = |o: ObjectId| o.is_background();
        assert_eq!(v.assign_layer(C, pinned), LayerDecision::Rejected);
        // demoting A must not push the background out either
        let act = v.activate(C, pinned, false);
        assert_eq!(act.dropped, Some(A));
        assert_eq!(v.inactive_id(), Some(ObjectId::BACKGROUND));
    }

    #[test]
    fn confidence_rule() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 2)),
            inactive: None,
        };
        assert_eq!(v.update_confidence(A, never, false), ConfidenceUpdate::Reinforced);
        assert_eq!(v.active, Some(Slot::new(A, 3)));

        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 2)),
            inactive: None,
        };
        assert_eq!(v.update_confidence(B, never, false), ConfidenceUpdate::Weakened);
        assert_eq!(v.active, Some(Slot::new(A, 1)));

        let out = v.update_confidence(B, never, false);
        assert!(matches!(out, ConfidenceUpdate::Swapped { former: A, .. }));
        assert_eq!(v.active, Some(Slot::new(B, 1)));
        assert_eq!(v.inactive_id(), Some(A));
    }

    #[test]
    fn single_layer_swap_drops_former() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 1)),
            inactive: None,
        };
        let out = v.update_confidence(B, never, true);
        assert_eq!(
            out,
            ConfidenceUpdate::Swapped {
                former: A,
                activation: Activation {
                    demoted: None,
                    dropped: Some(A)
                }
            }
        );
        assert_eq!(v.inactive, None);
    }

    #[test]
    fn deactivate_promotes_inactive() {
        let mut v = MultiObjectVoxel {
            active: Some(Slot::new(A, 4)),
            inactive: Some(Slot::new(B, 7)),
        };
        assert!(v.deactivate(A));
        assert_eq!(v.active, Some(Slot::new(B, 7)));
        assert_eq!(v.inactive, None);
        assert!(!v.deactivate(C));
    }

    fn arb_voxel() -> impl Strategy<Value = MultiObjectVoxel> {
        (0u32..4, 1u32..4, 0u32..4, 1u32..4).prop_map(|(a, ca, i, ci)| {
            let active = (a > 0).then(|| Slot::new(ObjectId(a), ca));
            let inactive = (i > 0 && i != a).then(|| Slot::new(ObjectId(i + 4), ci));
            MultiObjectVoxel { active, inactive }
        })
    }

    proptest! {
        #[test]
        fn layer_cap_holds(mut v in arb_voxel(), ops in prop::collection::vec((0u8..4, 0u32..9, any::<bool>()), 1..40)) {
            for (op, id, single) in ops {
                let id = ObjectId(id);
                let pinned = |o: ObjectId| o.is_background();
                match op {
                    0 => { v.assign_layer(id, pinned); }
                    1 => { v.activate(id, pinned, single); }
                    2 => { v.update_confidence(id, pinned, single); }
                    _ => { v.deactivate(id); }
                }
                prop_assert!(v.occupied_slots() <= 2);
                if let (Some(a), Some(i)) = (v.active, v.inactive) {
                    prop_assert_ne!(a.id, i.id);
                }
                for s in [v.active, v.inactive].into_iter().flatten() {
                    prop_assert!(s.confidence >= 1);
                }
            }
        }
    }
}
