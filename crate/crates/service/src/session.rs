//! Annotation session state. Every mutation checks the caller's revision
//! and bumps it on success.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use virotem::classical::CandidateCircle;
use virotem::raster::{disc_pixels, Circle, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionCircle {
    pub id: u64,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub provenance: Provenance,
}

impl SessionCircle {
    pub fn circle(&self) -> Circle {
        Circle::new(self.cx, self.cy, self.r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub revision: u64,
    pub next_circle_id: u64,
    pub circles: Vec<SessionCircle>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("stale revision {given}, session is at {current}")]
    Conflict { given: u64, current: u64 },
    #[error("no circle with id {0}")]
    UnknownCircle(u64),
    #[error("circle out of bounds: {0}")]
    OutOfBounds(String),
}

/// Partial update of a circle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CirclePatch {
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub r: Option<f64>,
}

impl Session {
    pub fn new(id: String, image: String, width: usize, height: usize) -> Self {
        Self { id, image, width, height, revision: 0, next_circle_id: 1, circles: Vec::new() }
    }

    fn check_revision(&self, given: u64) -> Result<(), SessionError> {
        if given != self.revision {
            return Err(SessionError::Conflict { given, current: self.revision });
        }
        Ok(())
    }

    /// Centre inside the image, positive finite radius, at least one pixel.
    fn check_bounds(&self, cx: f64, cy: f64, r: f64) -> Result<(), SessionError> {
        let (w, h) = (self.width as f64, self.height as f64);
        let ok = cx.is_finite()
            && cy.is_finite()
            && r.is_finite()
            && (-0.5..w - 0.5).contains(&cx)
            && (-0.5..h - 0.5).contains(&cy)
            && r > 0.0
            && disc_pixels(cx, cy, r, self.width, self.height).next().is_some();
        if !ok {
            return Err(SessionError::OutOfBounds(format!(
                "({cx}, {cy}, r={r}) on a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn position(&self, cid: u64) -> Result<usize, SessionError> {
        self.circles.iter().position(|c| c.id == cid).ok_or(SessionError::UnknownCircle(cid))
    }

    fn push(&mut self, cx: f64, cy: f64, r: f64, provenance: Provenance) -> u64 {
        let id = self.next_circle_id;
        self.next_circle_id += 1;
        self.circles.push(SessionCircle { id, cx, cy, r, provenance });
        id
    }

    /// Adds a manual circle and returns its id.
    pub fn add(&mut self, revision: u64, cx: f64, cy: f64, r: f64) -> Result<u64, SessionError> {
        self.check_revision(revision)?;
        self.check_bounds(cx, cy, r)?;
        let id = self.push(cx, cy, r, Provenance::Manual);
        self.revision += 1;
        Ok(id)
    }

    pub fn update(&mut self, revision: u64, cid: u64, patch: &CirclePatch) -> Result<(), SessionError> {
        self.check_revision(revision)?;
        let i = self.position(cid)?;
        let c = self.circles[i];
        let (cx, cy, r) = (patch.cx.unwrap_or(c.cx), patch.cy.unwrap_or(c.cy), patch.r.unwrap_or(c.r));
        self.check_bounds(cx, cy, r)?;
        self.circles[i] = SessionCircle { cx, cy, r, ..c };
        self.revision += 1;
        Ok(())
    }

    pub fn delete(&mut self, revision: u64, cid: u64) -> Result<(), SessionError> {
        self.check_revision(revision)?;
        let i = self.position(cid)?;
        self.circles.remove(i);
        self.revision += 1;
        Ok(())
    }

    /// Replaces all automatic circles with `candidates`; manual circles stay.
    /// Candidates outside the image are dropped.
    pub fn replace_auto(&mut self, revision: u64, candidates: &[CandidateCircle]) -> Result<(), SessionError> {
        self.check_revision(revision)?;
        self.circles.retain(|c| c.provenance == Provenance::Manual);
        for c in candidates {
            if self.check_bounds(c.cx, c.cy, c.r).is_ok() {
                self.push(c.cx, c.cy, c.r, Provenance::Auto);
            }
        }
        self.revision += 1;
        Ok(())
    }

    pub fn plain_circles(&self) -> Vec<Circle> {
        self.circles.iter().map(SessionCircle::circle).collect()
    }

    /// Union of the rasterized circles.
    pub fn mask(&self) -> LabelMask {
        LabelMask::from_circles(self.width, self.height, &self.plain_circles()).expect("session has valid dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> Session {
        Session::new("s1".into(), "img".into(), 64, 48)
    }

    #[test]
    fn add_delete_and_revisions() {
        let mut s = session();
        let a = s.add(0, 10.0, 10.0, 5.0).unwrap();
        let b = s.add(1, 30.0, 20.0, 6.0).unwrap();
        let c = s.add(2, 50.0, 40.0, 4.0).unwrap();
        assert_eq!((a, b, c), (1, 2, 3));
        s.delete(3, b).unwrap();
        assert_eq!(s.revision, 4);
        assert_eq!(s.circles.iter().map(|c| c.id).collect::<Vec<_>>(), vec![1, 3]);
        let want = LabelMask::from_circles(64, 48, &[Circle::new(10.0, 10.0, 5.0), Circle::new(50.0, 40.0, 4.0)]).unwrap();
        assert_eq!(s.mask(), want);
        // ids are never reused
        assert_eq!(s.add(4, 5.0, 5.0, 2.0).unwrap(), 4);
    }

    #[test]
    fn stale_revision_conflicts() {
        let mut s = session();
        let id = s.add(0, 10.0, 10.0, 5.0).unwrap();
        s.delete(1, id).unwrap();
        assert_eq!(s.delete(1, id), Err(SessionError::Conflict { given: 1, current: 2 }));
        assert_eq!(s.delete(2, id), Err(SessionError::UnknownCircle(id)));
        assert_eq!(s.revision, 2);
    }

    #[test]
    fn bounds_are_enforced() {
        let mut s = session();
        assert!(matches!(s.add(0, 64.0, 10.0, 5.0), Err(SessionError::OutOfBounds(_))));
        assert!(matches!(s.add(0, 10.0, 10.0, 0.0), Err(SessionError::OutOfBounds(_))));
        assert!(matches!(s.add(0, f64::NAN, 10.0, 3.0), Err(SessionError::OutOfBounds(_))));
        assert_eq!(s.revision, 0);
        let id = s.add(0, 0.0, 0.0, 1.0).unwrap();
        assert!(s.update(1, id, &CirclePatch { cy: Some(-3.0), ..Default::default() }).is_err());
        s.update(1, id, &CirclePatch { r: Some(9.0), ..Default::default() }).unwrap();
        assert_eq!(s.circles[0].r, 9.0);
        assert_eq!(s.circles[0].cx, 0.0);
    }

    #[test]
    fn proposals_replace_only_auto_circles() {
        let mut s = session();
        s.add(0, 10.0, 10.0, 5.0).unwrap();
        let cands = [
            CandidateCircle { cx: 30.0, cy: 30.0, r: 8.0, score: 1.0 },
            CandidateCircle { cx: 500.0, cy: 30.0, r: 8.0, score: 1.0 },
        ];
        s.replace_auto(1, &cands).unwrap();
        s.replace_auto(2, &cands[..1]).unwrap();
        let prov: Vec<_> = s.circles.iter().map(|c| c.provenance).collect();
        assert_eq!(prov, vec![Provenance::Manual, Provenance::Auto]);
        assert_eq!(s.revision, 3);
    }

    #[test]
    fn provenance_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Provenance::Auto).unwrap(), "\"auto\"");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(f64, f64, f64),
        Update(u64, Option<f64>, Option<f64>, Option<f64>),
        Delete(u64),
        Propose(Vec<(f64, f64, f64)>),
    }

    fn op() -> impl proptest::strategy::Strategy<Value = Op> {
        use proptest::prelude::*;
        let coord = -10.0f64..80.0;
        let radius = -1.0f64..20.0;
        prop_oneof![
            (coord.clone(), coord.clone(), radius.clone()).prop_map(|(x, y, r)| Op::Add(x, y, r)),
            (0u64..8, proptest::option::of(coord.clone()), proptest::option::of(coord.clone()), proptest::option::of(radius.clone()))
                .prop_map(|(id, x, y, r)| Op::Update(id, x, y, r)),
            (0u64..8).prop_map(Op::Delete),
            proptest::collection::vec((coord.clone(), coord, radius), 0..4).prop_map(Op::Propose),
        ]
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(10_000))]

        #[test]
        fn reducer_invariants(ops in proptest::collection::vec((op(), proptest::bool::weighted(0.85)), 0..25)) {
            let mut s = session();
            for (op, fresh) in ops {
                let before = s.clone();
                let rev = if fresh { s.revision } else { s.revision + 1 };
                let res = match &op {
                    Op::Add(x, y, r) => s.add(rev, *x, *y, *r).map(|_| ()),
                    Op::Update(id, cx, cy, r) => s.update(rev, *id, &CirclePatch { cx: *cx, cy: *cy, r: *r }),
                    Op::Delete(id) => s.delete(rev, *id),
                    Op::Propose(c) => {
                        let cands: Vec<_> = c.iter().map(|&(cx, cy, r)| CandidateCircle { cx, cy, r, score: 1.0 }).collect();
                        s.replace_auto(rev, &cands)
                    }
                };
                match res {
                    Ok(()) => proptest::prop_assert_eq!(s.revision, before.revision + 1),
                    Err(e) => {
                        proptest::prop_assert_eq!(&s, &before);
                        if !fresh {
                            let conflict = matches!(e, SessionError::Conflict { .. });
                            proptest::prop_assert!(conflict);
                        }
                    }
                }
                // ids stay unique and increasing
                let ids: Vec<u64> = s.circles.iter().map(|c| c.id).collect();
                proptest::prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
                proptest::prop_assert!(ids.iter().all(|&i| i < s.next_circle_id));
                for c in &s.circles {
                    proptest::prop_assert!(s.check_bounds(c.cx, c.cy, c.r).is_ok());
                }
                let round: Session = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
                proptest::prop_assert_eq!(&round, &s);
            }
        }
    }
}
