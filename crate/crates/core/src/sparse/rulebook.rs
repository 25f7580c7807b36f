use std::collections::{BTreeMap, HashMap};

use super::{coord_key, in_grid, order_key, ConvMode, ConvSpec, Coord, SparseTensor};
use crate::error::{Error, Result};

/// Gather/scatter pairs for one convolution, grouped by kernel offset.
///
/// For offset `k`, a pair `(i, o)` means input row `i` feeds output row `o`
/// through weight slice `W[k]`. The input side is kept so an inverse
/// convolution can scatter back onto exactly these sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub offsets: Vec<[i32; 3]>,
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub conv_stride: usize,
    pub input_coords: Vec<Coord>,
    pub input_grid_dims: [usize; 3],
    pub input_stride: usize,
    pub output_coords: Vec<Coord>,
    pub output_grid_dims: [usize; 3],
}

impl Rulebook {
    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn output_stride(&self) -> usize {
        self.input_stride * self.conv_stride
    }
}

/// Kernel offsets in z-major, then y, then x order, each from `-k/2` to `+k/2`.
pub fn kernel_offsets(kernel: [usize; 3]) -> Vec<[i32; 3]> {
    let r = kernel.map(|k| (k / 2) as i32);
    let mut out = Vec::with_capacity(kernel.iter().product());
    for dz in -r[2]..=r[2] {
        for dy in -r[1]..=r[1] {
            for dx in -r[0]..=r[0] {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

pub fn build_rulebook(input: &SparseTensor, spec: &ConvSpec) -> Result<Rulebook> {
    spec.validate()?;
    let offsets = kernel_offsets(spec.kernel);
    match spec.mode {
        ConvMode::Submanifold => Ok(submanifold(input, offsets)),
        ConvMode::Strided => Ok(strided(input, offsets, spec.stride)),
        ConvMode::Inverse => Err(Error::config(
            "inverse convolutions reuse the rulebook of their encoder layer",
        )),
    }
}

fn submanifold(input: &SparseTensor, offsets: Vec<[i32; 3]>) -> Rulebook {
    let index = input.index();
    let pairs = offsets
        .iter()
        .map(|off| {
            input
                .coords
                .iter()
                .enumerate()
                .filter_map(|(o, c)| {
                    let q = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                    if !in_grid(&q, input.grid_dims) {
                        return None;
                    }
                    index.get(&coord_key(&q, input.grid_dims)).map(|&i| (i, o))
                })
                .collect()
        })
        .collect();
    Rulebook {
        offsets,
        pairs,
        conv_stride: 1,
        input_coords: input.coords.clone(),
        input_grid_dims: input.grid_dims,
        input_stride: input.stride,
        output_coords: input.coords.clone(),
        output_grid_dims: input.grid_dims,
    }
}

/// Output site `o` reads input `o * stride + offset`; every output position
/// whose window touches an active input becomes active.
fn strided(input: &SparseTensor, offsets: Vec<[i32; 3]>, stride: usize) -> Rulebook {
    let s = stride as i32;
    let out_dims = input.grid_dims.map(|g| g.div_ceil(stride));

    // (input row, offset index, output coord)
    let mut hits: Vec<(usize, usize, Coord)> = Vec::new();
    let mut sites: BTreeMap<(i32, i32, i32), Coord> = BTreeMap::new();
    for (i, c) in input.coords.iter().enumerate() {
        'offsets: for (k, off) in offsets.iter().enumerate() {
            let mut o = [0i32; 3];
            for a in 0..3 {
                let num = c[a] - off[a];
                if num.rem_euclid(s) != 0 {
                    continue 'offsets;
                }
                o[a] = num.div_euclid(s);
            }
            if !in_grid(&o, out_dims) {
                continue;
            }
            sites.insert(order_key(&o), o);
            hits.push((i, k, o));
        }
    }

    let output_coords: Vec<Coord> = sites.into_values().collect();
    let out_index: HashMap<u64, usize> = output_coords
        .iter()
        .enumerate()
        .map(|(r, c)| (coord_key(c, out_dims), r))
        .collect();
    let mut pairs = vec![Vec::new(); offsets.len()];
    for (i, k, o) in hits {
        pairs[k].push((i, out_index[&coord_key(&o, out_dims)]));
    }
    Rulebook {
        offsets,
        pairs,
        conv_stride: stride,
        input_coords: input.coords.clone(),
        input_grid_dims: input.grid_dims,
        input_stride: input.stride,
        output_coords,
        output_grid_dims: out_dims,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::collections::HashSet;

    fn tensor(coords: Vec<Coord>, grid: [usize; 3]) -> SparseTensor {
        let n = coords.len();
        SparseTensor::new(coords, Array2::ones((n, 1)), grid, 1).unwrap()
    }

    #[test]
    fn offsets_are_z_major() {
        let o = kernel_offsets([3, 3, 3]);
        assert_eq!(o.len(), 27);
        assert_eq!(o[0], [-1, -1, -1]);
        assert_eq!(o[1], [0, -1, -1]);
        assert_eq!(o[3], [-1, 0, -1]);
        assert_eq!(o[13], [0, 0, 0]);
        assert_eq!(o[26], [1, 1, 1]);
    }

    #[test]
    fn isolated_site_has_only_center_pair() {
        let t = tensor(vec![[4, 4, 4]], [8, 8, 8]);
        let rb = build_rulebook(&t, &ConvSpec::zeros([3, 3, 3], 1, 1, 1, ConvMode::Submanifold)).unwrap();
        assert_eq!(rb.num_pairs(), 1);
        assert_eq!(rb.pairs[13], vec![(0, 0)]);
    }

    #[test]
    fn adjacent_sites_give_four_pairs() {
        let t = tensor(vec![[0, 0, 0], [1, 0, 0]], [4, 4, 4]);
        let rb = build_rulebook(&t, &ConvSpec::zeros([3, 3, 3], 1, 1, 1, ConvMode::Submanifold)).unwrap();
        assert_eq!(rb.num_pairs(), 4);
        assert_eq!(rb.output_coords, t.coords);
        // output 0 at (0,0,0) reads (1,0,0) through offset +x (index 14)
        assert_eq!(rb.pairs[14], vec![(1, 0)]);
        assert_eq!(rb.pairs[12], vec![(0, 1)]);
    }

    #[test]
    fn strided_single_site_matches_window_enumeration() {
        let t = tensor(vec![[5, 5, 5]], [16, 16, 16]);
        let rb = build_rulebook(&t, &ConvSpec::zeros([3, 3, 3], 2, 1, 1, ConvMode::Strided)).unwrap();
        // brute force: every anchor o with |2o - 5| <= 1 per axis
        let mut expected = Vec::new();
        for oz in 0..8i32 {
            for oy in 0..8i32 {
                for ox in 0..8i32 {
                    if [ox, oy, oz].iter().all(|&o| (2 * o - 5).abs() <= 1) {
                        expected.push([ox, oy, oz]);
                    }
                }
            }
        }
        assert_eq!(expected.len(), 8);
        assert_eq!(rb.output_coords, expected);
        assert_eq!(rb.output_grid_dims, [8, 8, 8]);
        assert_eq!(rb.num_pairs(), 8);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let t = tensor(vec![[0, 0, 0]], [4, 4, 4]);
        let spec = ConvSpec::zeros([2, 3, 3], 1, 1, 1, ConvMode::Submanifold);
        assert!(matches!(build_rulebook(&t, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn pairs_are_unique_and_valid() {
        let coords: Vec<Coord> = (0..30).map(|i| [(i * 7) % 9, (i * 5) % 9, (i * 3) % 5]).collect::<HashSet<_>>().into_iter().collect();
        let t = tensor(coords, [9, 9, 5]);
        for (mode, stride) in [(ConvMode::Submanifold, 1), (ConvMode::Strided, 1), (ConvMode::Strided, 2)] {
            let rb = build_rulebook(&t, &ConvSpec::zeros([3, 3, 3], stride, 1, 1, mode)).unwrap();
            let mut seen = HashSet::new();
            for (k, list) in rb.pairs.iter().enumerate() {
                for &(i, o) in list {
                    assert!(i < t.num_active() && o < rb.output_coords.len());
                    assert!(seen.insert((k, i, o)));
                }
            }
        }
    }
}
