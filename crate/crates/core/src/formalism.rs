//! Task-state formalism and the per-step behaviour feature extractors.
//!
//! A task state is an ordered list of entity groups plus a distance function.
//! Every group declares the names of its `κ` time-varying attributes and the
//! bounds `[η_min, η_max]` on its cardinality. From these declarations alone a
//! [`StateLayout`] derives the feature schema emitted by [`extract_features`]:
//!
//! 1. relative group size, for every group with `η_max > η_min`;
//! 2. mean state, one feature per attribute, for every group with `κ ≥ 1`;
//! 3. dispersion, for every group with `η_max > 1`;
//! 4. mean pairwise distance, for every unordered group pair `(i, j)`, `i < j`,
//!    in declaration order, minus the pairs the layout explicitly excludes.
//!
//! Features that cannot be evaluated at a given step (a mean over an empty
//! group, a dispersion over fewer than two entities, a distance to an empty
//! group) keep the value they had at the previous step, or 0 at the first one.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{Segment, Vec2};
use crate::sdbc::FeatureSnapshot;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormalismError {
    #[error("group `{0}` has eta_max == eta_min, so its size feature is undefined")]
    DegenerateGroup(String),
    #[error("group `{0}` is empty")]
    EmptyGroup(String),
    #[error("group `{0}` has no state attributes")]
    Stateless(String),
    #[error("dispersion of group `{group}` needs at least two entities, found {len}")]
    TooFewEntities { group: String, len: usize },
    #[error("entity of group `{group}` has {got} attributes, expected {expected}")]
    KappaMismatch {
        group: String,
        expected: usize,
        got: usize,
    },
    #[error("group `{group}` holds {len} entities, outside [{eta_min}, {eta_max}]")]
    SizeOutOfBounds {
        group: String,
        len: usize,
        eta_min: usize,
        eta_max: usize,
    },
    #[error("invalid declaration for group `{group}`: {reason}")]
    InvalidDeclaration { group: String, reason: String },
    #[error("pair distance requires two distinct groups, got `{0}` twice")]
    SameGroup(String),
    #[error("task state must declare at least one entity group")]
    NoGroups,
    #[error("group pair ({0}, {1}) is out of range")]
    PairOutOfRange(usize, usize),
}

/// Declaration of one entity group: attribute names and cardinality bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDecl {
    pub name: String,
    pub attributes: Vec<String>,
    pub eta_min: usize,
    pub eta_max: usize,
}

impl GroupDecl {
    pub fn new(name: &str, attributes: &[&str], eta_min: usize, eta_max: usize) -> Self {
        Self {
            name: name.to_string(),
            attributes: attributes.iter().map(|a| a.to_string()).collect(),
            eta_min,
            eta_max,
        }
    }

    pub fn kappa(&self) -> usize {
        self.attributes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Size { group: usize },
    MeanState { group: usize, attribute: usize },
    Dispersion { group: usize },
    PairDistance { a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub name: String,
}

/// Group declarations of a task together with the feature schema they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    groups: Vec<GroupDecl>,
    excluded_pairs: Vec<(usize, usize)>,
    features: Vec<FeatureSpec>,
    schema_id: u64,
}

impl StateLayout {
    pub fn new(
        groups: Vec<GroupDecl>,
        excluded_pairs: &[(usize, usize)],
    ) -> Result<Self, FormalismError> {
        if groups.is_empty() {
            return Err(FormalismError::NoGroups);
        }
        for g in &groups {
            let invalid = |reason: &str| FormalismError::InvalidDeclaration {
                group: g.name.clone(),
                reason: reason.to_string(),
            };
            if g.eta_max == 0 {
                return Err(invalid("eta_max must be positive"));
            }
            if g.eta_min > g.eta_max {
                return Err(invalid("eta_min exceeds eta_max"));
            }
        }
        let mut excluded = Vec::with_capacity(excluded_pairs.len());
        for &(a, b) in excluded_pairs {
            if a >= groups.len() || b >= groups.len() || a == b {
                return Err(FormalismError::PairOutOfRange(a, b));
            }
            excluded.push((a.min(b), a.max(b)));
        }

        let mut features = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            if g.eta_max > g.eta_min {
                features.push(FeatureSpec {
                    kind: FeatureKind::Size { group: i },
                    name: format!("{} group size", g.name),
                });
            }
        }
        for (i, g) in groups.iter().enumerate() {
            for (j, attr) in g.attributes.iter().enumerate() {
                features.push(FeatureSpec {
                    kind: FeatureKind::MeanState {
                        group: i,
                        attribute: j,
                    },
                    name: format!("{} {}", g.name, attr),
                });
            }
        }
        for (i, g) in groups.iter().enumerate() {
            if g.eta_max > 1 {
                features.push(FeatureSpec {
                    kind: FeatureKind::Dispersion { group: i },
                    name: format!("{} dispersion", g.name),
                });
            }
        }
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                if excluded.contains(&(a, b)) {
                    continue;
                }
                features.push(FeatureSpec {
                    kind: FeatureKind::PairDistance { a, b },
                    name: format!("{}-{} distance", groups[a].name, groups[b].name),
                });
            }
        }

        let schema_id = schema_hash(features.iter().map(|f| f.name.as_str()));
        Ok(Self {
            groups,
            excluded_pairs: excluded,
            features,
            schema_id,
        })
    }

    pub fn groups(&self) -> &[GroupDecl] {
        &self.groups
    }

    pub fn excluded_pairs(&self) -> &[(usize, usize)] {
        &self.excluded_pairs
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn schema_id(&self) -> u64 {
        self.schema_id
    }
}

/// FNV-1a over the feature names, separated by a NUL byte.
pub(crate) fn schema_hash<'a>(names: impl Iterator<Item = &'a str>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for name in names {
        for byte in name.bytes().chain(std::iter::once(0u8)) {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// An owned entity: time-varying attributes plus constant properties.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityState {
    pub theta: Vec<f64>,
    pub props: Vec<f64>,
}

impl EntityState {
    pub fn new(theta: Vec<f64>, props: Vec<f64>) -> Self {
        Self { theta, props }
    }
}

/// Borrowed view of one entity inside a group.
#[derive(Debug, Clone, Copy)]
pub struct EntityRef<'a> {
    pub group: usize,
    pub theta: &'a [f64],
    pub props: &'a [f64],
}

/// Physical distance between two entities, possibly from different groups.
///
/// Implementations must be symmetric and return 0 for an entity and itself.
pub trait DistanceFunction: Send + Sync {
    fn distance(&self, a: EntityRef<'_>, b: EntityRef<'_>) -> f64;
}

impl<F> DistanceFunction for F
where
    F: Fn(EntityRef<'_>, EntityRef<'_>) -> f64 + Send + Sync,
{
    fn distance(&self, a: EntityRef<'_>, b: EntityRef<'_>) -> f64 {
        self(a, b)
    }
}

/// The entities of one group at one simulation step, stored flat.
#[derive(Debug, Clone)]
pub struct EntityGroup {
    index: usize,
    name: String,
    kappa: usize,
    eta_min: usize,
    eta_max: usize,
    theta: Vec<f64>,
    props: Vec<f64>,
    prop_ends: Vec<usize>,
}

impl EntityGroup {
    pub fn new(index: usize, decl: &GroupDecl) -> Self {
        Self {
            index,
            name: decl.name.clone(),
            kappa: decl.kappa(),
            eta_min: decl.eta_min,
            eta_max: decl.eta_max,
            theta: Vec::new(),
            props: Vec::new(),
            prop_ends: Vec::new(),
        }
    }

    pub fn with_entities(
        index: usize,
        decl: &GroupDecl,
        entities: &[EntityState],
    ) -> Result<Self, FormalismError> {
        let mut g = Self::new(index, decl);
        for e in entities {
            g.push(&e.theta, &e.props)?;
        }
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn eta_min(&self) -> usize {
        self.eta_min
    }

    pub fn eta_max(&self) -> usize {
        self.eta_max
    }

    pub fn len(&self) -> usize {
        self.prop_ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prop_ends.is_empty()
    }

    pub fn clear(&mut self) {
        self.theta.clear();
        self.props.clear();
        self.prop_ends.clear();
    }

    pub fn push(&mut self, theta: &[f64], props: &[f64]) -> Result<(), FormalismError> {
        if theta.len() != self.kappa {
            return Err(FormalismError::KappaMismatch {
                group: self.name.clone(),
                expected: self.kappa,
                got: theta.len(),
            });
        }
        self.theta.extend_from_slice(theta);
        self.props.extend_from_slice(props);
        self.prop_ends.push(self.props.len());
        Ok(())
    }

    pub fn entity(&self, i: usize) -> EntityRef<'_> {
        let start = if i == 0 { 0 } else { self.prop_ends[i - 1] };
        EntityRef {
            group: self.index,
            theta: &self.theta[i * self.kappa..(i + 1) * self.kappa],
            props: &self.props[start..self.prop_ends[i]],
        }
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.entity(i))
    }

    pub fn check_size(&self) -> Result<(), FormalismError> {
        if self.len() < self.eta_min || self.len() > self.eta_max {
            return Err(FormalismError::SizeOutOfBounds {
                group: self.name.clone(),
                len: self.len(),
                eta_min: self.eta_min,
                eta_max: self.eta_max,
            });
        }
        Ok(())
    }
}

/// Relative size of a group within its declared bounds.
pub fn group_size_feature(g: &EntityGroup) -> Result<f64, FormalismError> {
    if g.eta_max <= g.eta_min {
        return Err(FormalismError::DegenerateGroup(g.name.clone()));
    }
    Ok((g.len() as f64 - g.eta_min as f64) / (g.eta_max - g.eta_min) as f64)
}

pub fn group_mean_state(g: &EntityGroup) -> Result<Vec<f64>, FormalismError> {
    if g.kappa == 0 {
        return Err(FormalismError::Stateless(g.name.clone()));
    }
    (0..g.kappa).map(|j| mean_attribute(g, j)).collect()
}

fn mean_attribute(g: &EntityGroup, j: usize) -> Result<f64, FormalismError> {
    if g.is_empty() {
        return Err(FormalismError::EmptyGroup(g.name.clone()));
    }
    let n = g.len() as f64;
    Ok(g.theta.iter().skip(j).step_by(g.kappa).map(|v| v / n).sum())
}

/// Sum of distances over ordered pairs of distinct members, divided by `(|g|-1)²`.
pub fn group_dispersion(g: &EntityGroup, f: &dyn DistanceFunction) -> Result<f64, FormalismError> {
    let n = g.len();
    if n < 2 {
        return Err(FormalismError::TooFewEntities {
            group: g.name.clone(),
            len: n,
        });
    }
    let denom = ((n - 1) * (n - 1)) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let ei = g.entity(i);
        for j in 0..n {
            if j != i {
                total += f.distance(ei, g.entity(j)) / denom;
            }
        }
    }
    Ok(total)
}

/// Mean distance over all cross pairs of two distinct groups.
pub fn group_pair_distance(
    a: &EntityGroup,
    b: &EntityGroup,
    f: &dyn DistanceFunction,
) -> Result<f64, FormalismError> {
    if a.index == b.index {
        return Err(FormalismError::SameGroup(a.name.clone()));
    }
    if a.is_empty() {
        return Err(FormalismError::EmptyGroup(a.name.clone()));
    }
    if b.is_empty() {
        return Err(FormalismError::EmptyGroup(b.name.clone()));
    }
    let denom = (a.len() * b.len()) as f64;
    let mut total = 0.0;
    for ea in a.entities() {
        for eb in b.entities() {
            total += f.distance(ea, eb) / denom;
        }
    }
    Ok(total)
}

/// One task state: the groups of a layout at a given step and the distance function.
#[derive(Clone)]
pub struct TaskStateSnapshot {
    layout: Arc<StateLayout>,
    groups: Vec<EntityGroup>,
    distance: Arc<dyn DistanceFunction>,
}

impl std::fmt::Debug for TaskStateSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskStateSnapshot")
            .field("groups", &self.groups)
            .finish_non_exhaustive()
    }
}

impl TaskStateSnapshot {
    /// A snapshot with every group empty, ready to be filled.
    pub fn new(layout: Arc<StateLayout>, distance: Arc<dyn DistanceFunction>) -> Self {
        let groups = layout
            .groups()
            .iter()
            .enumerate()
            .map(|(i, d)| EntityGroup::new(i, d))
            .collect();
        Self {
            layout,
            groups,
            distance,
        }
    }

    pub fn from_entities(
        layout: Arc<StateLayout>,
        distance: Arc<dyn DistanceFunction>,
        entities: &[Vec<EntityState>],
    ) -> Result<Self, FormalismError> {
        let mut s = Self::new(layout, distance);
        for (group, members) in s.groups.iter_mut().zip(entities) {
            for e in members {
                group.push(&e.theta, &e.props)?;
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn layout(&self) -> &Arc<StateLayout> {
        &self.layout
    }

    pub fn groups(&self) -> &[EntityGroup] {
        &self.groups
    }

    pub fn group_mut(&mut self, i: usize) -> &mut EntityGroup {
        &mut self.groups[i]
    }

    pub fn distance(&self) -> &dyn DistanceFunction {
        self.distance.as_ref()
    }

    pub fn validate(&self) -> Result<(), FormalismError> {
        self.groups.iter().try_for_each(EntityGroup::check_size)
    }
}

/// Extracts the feature vector of one snapshot. Features that are undefined at
/// this step are taken from `previous` (or 0 when there is none).
pub fn extract_features(
    s: &TaskStateSnapshot,
    previous: Option<&FeatureSnapshot>,
) -> FeatureSnapshot {
    let layout = s.layout();
    let mut values = match previous {
        Some(p) if p.values.len() == layout.feature_count() => p.values.clone(),
        _ => vec![0.0; layout.feature_count()],
    };
    extract_features_into(s, &mut values);
    FeatureSnapshot {
        values,
        schema_id: layout.schema_id(),
    }
}

/// In-place variant of [`extract_features`]: `out` holds the previous values on
/// entry and is overwritten wherever a feature is defined at this step.
pub fn extract_features_into(s: &TaskStateSnapshot, out: &mut [f64]) {
    debug_assert_eq!(out.len(), s.layout.feature_count());
    debug_assert!(s.validate().is_ok(), "{:?}", s.validate());
    let f = s.distance();
    for (slot, spec) in out.iter_mut().zip(s.layout.features()) {
        let value = match spec.kind {
            FeatureKind::Size { group } => group_size_feature(&s.groups[group]).ok(),
            FeatureKind::MeanState { group, attribute } => {
                mean_attribute(&s.groups[group], attribute).ok()
            }
            FeatureKind::Dispersion { group } => group_dispersion(&s.groups[group], f).ok(),
            FeatureKind::PairDistance { a, b } => {
                group_pair_distance(&s.groups[a], &s.groups[b], f).ok()
            }
        };
        if let Some(v) = value {
            *slot = v;
        }
    }
}

/// How an entity of a given group occupies space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Point whose position is the first two state attributes.
    StatePoint,
    /// Point whose position is the first two constant properties.
    FixedPoint,
    /// Polyline of segments, four constant properties `(x1, y1, x2, y2)` each.
    Segments,
    /// Boundary of a circle with constant properties `(cx, cy, r)`.
    CircleBoundary,
}

enum Geom<'a> {
    Point(Vec2),
    Segments(&'a [f64]),
    Circle(Vec2, f64),
}

/// Euclidean distance between entity shapes, with one [`Shape`] per group.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDistance {
    shapes: Vec<Shape>,
}

impl SpatialDistance {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { shapes }
    }

    fn geom<'a>(&self, e: EntityRef<'a>) -> Geom<'a> {
        match self.shapes[e.group] {
            Shape::StatePoint => Geom::Point(Vec2::new(e.theta[0], e.theta[1])),
            Shape::FixedPoint => Geom::Point(Vec2::new(e.props[0], e.props[1])),
            Shape::Segments => Geom::Segments(e.props),
            Shape::CircleBoundary => Geom::Circle(Vec2::new(e.props[0], e.props[1]), e.props[2]),
        }
    }
}

fn segments(props: &[f64]) -> impl Iterator<Item = Segment> + '_ {
    props
        .chunks_exact(4)
        .map(|c| Segment::new(c[0], c[1], c[2], c[3]))
}

fn circle_segment_distance(c: Vec2, r: f64, s: &Segment) -> f64 {
    let near = s.distance_to_point(c);
    let far = c.distance(s.a).max(c.distance(s.b));
    if r < near {
        near - r
    } else if r > far {
        r - far
    } else {
        0.0
    }
}

fn geom_distance(a: &Geom<'_>, b: &Geom<'_>) -> f64 {
    match (a, b) {
        (Geom::Point(p), Geom::Point(q)) => p.distance(*q),
        (Geom::Point(p), Geom::Segments(s)) | (Geom::Segments(s), Geom::Point(p)) => segments(s)
            .map(|seg| seg.distance_to_point(*p))
            .fold(f64::INFINITY, f64::min),
        (Geom::Point(p), Geom::Circle(c, r)) | (Geom::Circle(c, r), Geom::Point(p)) => {
            (p.distance(*c) - r).abs()
        }
        (Geom::Segments(s), Geom::Segments(t)) => {
            let mut best = f64::INFINITY;
            for u in segments(s) {
                for v in segments(t) {
                    best = best.min(u.distance_to_segment(&v));
                }
            }
            best
        }
        (Geom::Segments(s), Geom::Circle(c, r)) | (Geom::Circle(c, r), Geom::Segments(s)) => {
            segments(s)
                .map(|seg| circle_segment_distance(*c, *r, &seg))
                .fold(f64::INFINITY, f64::min)
        }
        (Geom::Circle(c1, r1), Geom::Circle(c2, r2)) => {
            let d = c1.distance(*c2);
            if d > r1 + r2 {
                d - r1 - r2
            } else if d < (r1 - r2).abs() {
                (r1 - r2).abs() - d
            } else {
                0.0
            }
        }
    }
}

impl DistanceFunction for SpatialDistance {
    fn distance(&self, a: EntityRef<'_>, b: EntityRef<'_>) -> f64 {
        geom_distance(&self.geom(a), &self.geom(b))
    }
}
