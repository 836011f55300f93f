use crate::volume::{BinaryMask, Grid, Index3, LabelVolume};

/// Connected components of a mask under 26-connectivity.
#[derive(Debug, Clone)]
pub struct Components {
    /// `0` for background, otherwise `1..=count`.
    pub labels: LabelVolume,
    pub count: u32,
}

impl Components {
    /// Voxels of each component in scan order; entry `l - 1` holds label `l`.
    pub fn voxel_lists(&self) -> Vec<Vec<Index3>> {
        let mut lists = vec![Vec::new(); self.count as usize];
        for (off, &l) in self.labels.data().iter().enumerate() {
            if l > 0 {
                lists[l as usize - 1].push(self.labels.index_of(off));
            }
        }
        lists
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let up = parent[parent[x as usize] as usize];
        parent[x as usize] = up;
        x = up;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Keep the smaller root so provisional labels stay in scan order.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Label 26-connected components. Labels are contiguous from 1, ordered by
/// each component's first voxel in x-fastest scan order.
pub fn connected_components(mask: &BinaryMask) -> Components {
    let [nx, ny, nz] = mask.dims();
    // The 13 neighbors that precede a voxel in scan order.
    let mut back: Vec<[i64; 3]> = Vec::with_capacity(13);
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                if (dz, dy, dx) < (0, 0, 0) {
                    back.push([dx, dy, dz]);
                }
            }
        }
    }

    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    let data = mask.data();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let off = i + nx * (j + ny * k);
                if !data[off] {
                    continue;
                }
                let mut label = 0u32;
                for d in &back {
                    let (x, y, z) = (i as i64 + d[0], j as i64 + d[1], k as i64 + d[2]);
                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 {
                        continue;
                    }
                    let n = provisional[x as usize + nx * (y as usize + ny * z as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = n;
                    } else if n != label {
                        union(&mut parent, label, n);
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[off] = label;
            }
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = provisional;
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        *l = remap[root];
    }
    Components {
        labels: Grid::new(mask.dims(), mask.spacing(), labels).expect("same geometry"),
        count,
    }
}
