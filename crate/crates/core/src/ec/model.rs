use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;

use crate::hash::{BlockKey, ConcurrentHashMap, HashConfig, HashError};
use crate::mc::{build_mesh_block, region_of, McBlock, MeshBlock};

/// The exploration client's copy of the MC model plus its mesh regions.
pub struct LocalModel {
    voxel_size: f32,
    discard: bool,
    blocks: ConcurrentHashMap<McBlock>,
    /// Member keys of every non-empty region.
    regions: Mutex<HashMap<BlockKey, HashSet<BlockKey>>>,
    dirty: Mutex<BTreeSet<BlockKey>>,
    meshes: RwLock<HashMap<BlockKey, Arc<MeshBlock>>>,
    pub blocks_received: AtomicU64,
    pub deletes_received: AtomicU64,
}

impl LocalModel {
    /// With `discard` set, payloads are only counted, as a benchmark client does.
    pub fn new(voxel_size: f32, hash: HashConfig, discard: bool) -> Self {
        Self {
            voxel_size,
            discard,
            blocks: ConcurrentHashMap::new(hash),
            regions: Mutex::new(HashMap::new()),
            dirty: Mutex::new(BTreeSet::new()),
            meshes: RwLock::new(HashMap::new()),
            blocks_received: AtomicU64::new(0),
            deletes_received: AtomicU64::new(0),
        }
    }

    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn is_discarding(&self) -> bool {
        self.discard
    }

    pub fn blocks(&self) -> &ConcurrentHashMap<McBlock> {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, key: BlockKey) -> Option<McBlock> {
        self.blocks.get(key)
    }

    /// Store received blocks and mark their regions dirty. Applying a batch twice is harmless.
    pub fn on_batch(&self, batch: Vec<(BlockKey, McBlock)>) -> Result<usize, HashError> {
        let n = batch.len();
        self.blocks_received.fetch_add(n as u64, Ordering::Relaxed);
        if self.discard || batch.is_empty() {
            return Ok(n);
        }
        let mut touched = Vec::with_capacity(n);
        for (k, b) in batch {
            self.blocks.upsert(k, b)?;
            touched.push(k);
        }
        let mut regions = self.regions.lock();
        let mut dirty = self.dirty.lock();
        for k in touched {
            let r = region_of(k);
            regions.entry(r).or_default().insert(k);
            dirty.insert(r);
        }
        Ok(n)
    }

    pub fn on_delete(&self, keys: &[BlockKey]) {
        self.deletes_received.fetch_add(keys.len() as u64, Ordering::Relaxed);
        if self.discard {
            return;
        }
        let mut regions = self.regions.lock();
        let mut dirty = self.dirty.lock();
        for &k in keys {
            self.blocks.remove(k);
            let r = region_of(k);
            if let Some(members) = regions.get_mut(&r) {
                members.remove(&k);
                if members.is_empty() {
                    regions.remove(&r);
                }
            }
            dirty.insert(r);
        }
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty.lock().len()
    }

    pub fn dirty_regions(&self) -> Vec<BlockKey> {
        self.dirty.lock().iter().copied().collect()
    }

    /// Rebuild up to `budget` dirty regions in parallel. Returns how many were rebuilt.
    pub fn rebuild_dirty(&self, budget: usize) -> usize {
        let picked: Vec<BlockKey> = {
            let mut dirty = self.dirty.lock();
            let picked: Vec<BlockKey> = dirty.iter().take(budget).copied().collect();
            for r in &picked {
                dirty.remove(r);
            }
            picked
        };
        if picked.is_empty() {
            return 0;
        }
        let jobs: Vec<(BlockKey, Vec<BlockKey>)> = {
            let regions = self.regions.lock();
            picked
                .iter()
                .map(|r| (*r, regions.get(r).map(|m| m.iter().copied().collect()).unwrap_or_default()))
                .collect()
        };
        let built: Vec<(BlockKey, Option<MeshBlock>)> = jobs
            .into_par_iter()
            .map(|(r, members)| {
                if members.is_empty() {
                    return (r, None);
                }
                let blocks: Vec<(BlockKey, McBlock)> =
                    members.into_iter().filter_map(|k| self.blocks.get(k).map(|b| (k, b))).collect();
                (r, Some(build_mesh_block(r, blocks.iter().map(|(k, b)| (*k, b)), self.voxel_size)))
            })
            .collect();
        let mut meshes = self.meshes.write();
        for (r, m) in built {
            match m {
                Some(m) => meshes.insert(r, Arc::new(m)),
                None => meshes.remove(&r),
            };
        }
        picked.len()
    }

    pub fn mesh(&self, region: BlockKey) -> Option<Arc<MeshBlock>> {
        self.meshes.read().get(&region).cloned()
    }

    pub fn mesh_count(&self) -> usize {
        self.meshes.read().len()
    }

    pub fn triangle_count(&self) -> usize {
        self.meshes.read().values().map(|m| m.mesh.triangles.len()).sum()
    }
}

/// Share of `reference` present in `local`; an empty reference counts as complete.
pub fn completeness<'a, I>(local: &HashSet<BlockKey>, reference: I) -> f64
where
    I: IntoIterator<Item = &'a BlockKey>,
{
    let (mut total, mut hit) = (0usize, 0usize);
    for k in reference {
        total += 1;
        hit += usize::from(local.contains(k));
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
