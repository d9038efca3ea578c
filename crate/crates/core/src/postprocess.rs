//! Threshold, largest connected component, then 3x3 closing.

use crate::mask::BinaryMask;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `P >= t` per pixel. Expects a single-image, single-channel map.
pub fn threshold<T: Real>(p: &Tensor<T>, t: f64) -> BinaryMask {
    let d = p.dims();
    let t = T::lit(t);
    BinaryMask::from_bits(d.h, d.w, p.data()[..d.h * d.w].iter().map(|&v| v >= t).collect())
        .expect("plane length matches")
}

const NEIGHBOURS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected component labels: `0` is background, components are numbered
/// from 1 in order of their first pixel in row-major order.
pub fn label_components(mask: &BinaryMask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0usize; h * w];
    let mut parent = vec![0usize];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            // Already-visited neighbours: the row above and the pixel to the left.
            let mut current = 0;
            for (dy, dx) in [(-1isize, -1isize), (-1, 0), (-1, 1), (0, -1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if !mask.get_or_bg(ny, nx) {
                    continue;
                }
                let l = find(&mut parent, labels[ny as usize * w + nx as usize]);
                if current == 0 {
                    current = l;
                } else if l != current {
                    let (lo, hi) = (current.min(l), current.max(l));
                    parent[hi] = lo;
                    current = lo;
                }
            }
            if current == 0 {
                current = parent.len();
                parent.push(current);
            }
            labels[y * w + x] = current;
        }
    }
    // Provisional labels grow with discovery order and unions keep the
    // smaller root, so each root is its component's first label.
    let mut dense = vec![0usize; parent.len()];
    let mut count = 0;
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l);
        if dense[root] == 0 {
            count += 1;
            dense[root] = count;
        }
        *l = dense[root];
    }
    (labels, count)
}

pub fn count_components(mask: &BinaryMask) -> usize {
    label_components(mask).1
}

/// Keeps the largest 8-connected component; equal areas go to the component
/// discovered first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, count) = label_components(mask);
    if count == 0 {
        return mask.clone();
    }
    let mut areas = vec![0usize; count + 1];
    for &l in &labels {
        areas[l] += 1;
    }
    let mut best = 1;
    for l in 2..=count {
        if areas[l] > areas[best] {
            best = l;
        }
    }
    BinaryMask::from_bits(mask.height(), mask.width(), labels.iter().map(|&l| l == best).collect())
        .expect("same dims")
}

fn morph(mask: &BinaryMask, dilate: bool) -> BinaryMask {
    BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        let centre = mask.get_or_bg(y, x);
        let mut hits = NEIGHBOURS_8.iter().map(|&(dy, dx)| mask.get_or_bg(y + dy, x + dx));
        if dilate {
            centre || hits.any(|b| b)
        } else {
            centre && hits.all(|b| b)
        }
    })
}

/// 3x3 dilation with out-of-bounds pixels treated as background.
pub fn dilate(mask: &BinaryMask) -> BinaryMask {
    morph(mask, true)
}

/// 3x3 erosion with out-of-bounds pixels treated as background.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    morph(mask, false)
}

/// Dilation followed by erosion, 3x3 square element.
///
/// Computed on the mask padded by one background pixel and cropped back,
/// which equals closing in an unbounded background plane. The result
/// always contains the input, so a component touching the image edge keeps
/// its edge pixels and is never split.
pub fn closing(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let padded = BinaryMask::from_fn(h + 2, w + 2, |y, x| mask.get_or_bg(y as isize - 1, x as isize - 1));
    let grown = dilate(&padded);
    BinaryMask::from_fn(h, w, |y, x| {
        let (y, x) = (y as isize + 1, x as isize + 1);
        grown.get_or_bg(y, x) && NEIGHBOURS_8.iter().all(|&(dy, dx)| grown.get_or_bg(y + dy, x + dx))
    })
}

pub fn postprocess_pipeline<T: Real>(p: &Tensor<T>) -> BinaryMask {
    closing(&largest_component(&threshold(p, DEFAULT_THRESHOLD)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn parse(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn threshold_convention() {
        let d = Dims::new(1, 1, 2, 2);
        assert!(threshold(&Tensor::<f32>::full(d, 0.49), 0.5).is_empty());
        assert_eq!(threshold(&Tensor::<f32>::full(d, 0.5), 0.5).area(), 4);
    }

    #[test]
    fn keeps_larger_blob_and_breaks_ties_by_discovery() {
        let m = parse(&["##...", "##..#", "#...#", ".....", "...#."]);
        assert_eq!(largest_component(&m), parse(&["##...", "##...", "#....", ".....", "....."]));
        let tie = parse(&["#..#", "#..#"]);
        assert_eq!(largest_component(&tie), parse(&["#...", "#..."]));
        assert!(largest_component(&BinaryMask::new(3, 3)).is_empty());
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        assert_eq!(count_components(&parse(&["#..", ".#.", "..#"])), 1);
        assert_eq!(count_components(&parse(&["#.#", "...", "#.#"])), 4);
        // U shape merges two provisional labels.
        assert_eq!(count_components(&parse(&["#.#", "#.#", "###"])), 1);
    }

    #[test]
    fn closing_fills_hole() {
        let m = parse(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        assert_eq!(closing(&m), parse(&[".....", ".###.", ".###.", ".###.", "....."]));
        assert!(closing(&BinaryMask::new(4, 4)).is_empty());
    }

    #[test]
    fn closing_keeps_components_joined_along_the_border() {
        let m = parse(&["#########", "##.....##", "##.....##", "##.....##", "........."]);
        let c = closing(&m);
        assert!(m.bits().iter().zip(c.bits()).all(|(&a, &b)| !a || b));
        assert_eq!(count_components(&c), 1);
    }

    #[test]
    fn pipeline_removes_speckle() {
        let d = Dims::new(1, 1, 8, 8);
        let p = Tensor::<f32>::from_fn(d, |_, _, y, x| {
            if (2..6).contains(&y) && (1..4).contains(&x) || (y, x) == (7, 7) {
                0.9
            } else {
                0.1
            }
        });
        let out = postprocess_pipeline(&p);
        assert_eq!(out.area(), 12);
        assert!(!out.get(7, 7));
    }
}
