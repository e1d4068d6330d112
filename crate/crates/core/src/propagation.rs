//! Streaming state: separation-constrained top-k query selection and the
//! fixed-capacity frame queue.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::types::{Pose, SceneQuery};

/// Greedy separation-constrained top-k: queries sorted by opacity descending
/// (ties by index ascending) are accepted while their anchor `p + o` stays at
/// least `delta` away from every previously accepted anchor. Returns the
/// accepted indices in acceptance order; may return fewer than `k`.
pub fn select_queries(queries: &[SceneQuery], k: usize, delta: f64) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    assert!(delta >= 0.0, "delta must be nonnegative");
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|&a, &b| {
        queries[b]
            .opacity
            .partial_cmp(&queries[a].opacity)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut accepted: Vec<usize> = Vec::with_capacity(k.min(queries.len()));
    for i in order {
        let anchor = queries[i].anchor();
        let separated = accepted
            .iter()
            .all(|&j| (queries[j].anchor() - anchor).norm() >= delta);
        if separated {
            accepted.push(i);
            if accepted.len() == k {
                break;
            }
        }
    }
    accepted
}

/// One stored frame of propagated queries.
#[derive(Debug, Clone)]
pub struct QueueFrame {
    pub frame_id: u64,
    pub queries: Vec<SceneQuery>,
    pub pose: Pose,
}

/// Fixed-capacity FIFO of past propagated queries with their poses.
#[derive(Debug, Clone)]
pub struct QueryQueue {
    capacity: usize,
    entries: VecDeque<QueueFrame>,
}

impl QueryQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &QueueFrame> {
        self.entries.iter()
    }

    /// Appends a frame, evicting the oldest when over capacity. Frame ids
    /// must be strictly increasing.
    pub fn push_frame(
        &mut self,
        frame_id: u64,
        queries: Vec<SceneQuery>,
        pose: Pose,
    ) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if frame_id <= last.frame_id {
                return Err(Error::OutOfOrderFrame {
                    got: frame_id,
                    last: last.frame_id,
                });
            }
        }
        self.entries.push_back(QueueFrame {
            frame_id,
            queries,
            pose,
        });
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// All stored queries expressed in the current frame: positions and
    /// velocities are transformed by `current_pose^-1 ∘ stored_pose`; other
    /// attributes are unchanged. Oldest frame first.
    pub fn gather_history(&self, current_pose: &Pose) -> Vec<SceneQuery> {
        let inv = current_pose.inverse();
        let mut out = Vec::new();
        for frame in &self.entries {
            let rel = inv.compose(&frame.pose);
            for q in &frame.queries {
                let mut q = q.clone();
                q.position = rel.transform_point(&q.position);
                q.velocity = rel.rotate_vector(&q.velocity);
                out.push(q);
            }
        }
        out
    }
}
