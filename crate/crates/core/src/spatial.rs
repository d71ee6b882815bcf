//! Exact nearest-neighbor queries over 3D points.

use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

/// Static kd-tree. Queries are exact; equidistant points resolve to the
/// lowest index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    // Permutation of point indices; each node owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = Point3::repeat(f64::INFINITY);
        let mut hi = Point3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        (hi - lo).imax()
    }

    /// Index and distance of the point nearest to `query`.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, query, &mut best);
        Some((best.1, best.0.sqrt()))
    }

    fn search(&self, node: usize, q: &Point3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equidistant candidates with lower indices reachable.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Mutual nearest neighbors between two point sets with distance strictly
/// below `max_dist`, as `(index in a, index in b, distance)` sorted by `a` index.
pub fn mutual_nearest(
    a: &[Point3],
    b: &[Point3],
    max_dist: f64,
) -> Vec<(usize, usize, f64)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let tree_a = KdTree::new(a);
    let tree_b = KdTree::new(b);
    a.iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d) = tree_b.nearest(p)?;
            if d >= max_dist {
                return None;
            }
            let (back, _) = tree_a.nearest(&b[j])?;
            (back == i).then_some((i, j, d))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Point3], q: &Point3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 5, 9, 100, 1000] {
            let pts = random_points(&mut rng, n);
            let tree = KdTree::new(&pts);
            for _ in 0..200 {
                let q = Point3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                );
                let (i, d) = tree.nearest(&q).unwrap();
                let (bi, bd) = brute_nearest(&pts, &q);
                assert_eq!(i, bi);
                assert_eq!(d, bd);
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // Many duplicates spread over several leaves.
        let mut pts = vec![Point3::new(1.0, 1.0, 1.0); 40];
        pts.extend((0..40).map(|i| Point3::new(i as f64, 0.0, 0.0)));
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Point3::new(1.0, 1.0, 1.0)).unwrap().0, 0);
        let grid: Vec<Point3> = (0..64)
            .map(|i| Point3::new((i % 4) as f64, ((i / 4) % 4) as f64, (i / 16) as f64))
            .collect();
        let tree = KdTree::new(&grid);
        // Equidistant from the eight corners of the unit cell at the origin.
        assert_eq!(tree.nearest(&Point3::new(0.5, 0.5, 0.5)).unwrap().0, 0);
    }

    #[test]
    fn empty_tree() {
        assert!(KdTree::new(&[]).nearest(&Point3::zeros()).is_none());
    }

    #[test]
    fn mutual_nearest_against_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = random_points(&mut rng, 60);
            let b = random_points(&mut rng, 80);
            let got = mutual_nearest(&a, &b, 0.2);
            let mut expected = Vec::new();
            for (i, p) in a.iter().enumerate() {
                let (j, d) = brute_nearest(&b, p);
                let (back, _) = brute_nearest(&a, &b[j]);
                if back == i && d < 0.2 {
                    expected.push((i, j, d));
                }
            }
            assert_eq!(got, expected);
        }
    }
}
