use crate::domain::Demonstration;
use crate::error::{Error, Result};
use crate::retrieval::norm;

/// Ordered, optionally bounded set of demonstrations.
///
/// Insertion order is the identity used for tie-breaking during retrieval.
/// Vector norms are cached alongside each entry so a query costs only dot
/// products.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    entries: Vec<Demonstration>,
    image_norms: Vec<f64>,
    text_norms: Vec<f64>,
    capacity: Option<usize>,
    dimension: usize,
    encoder_id: String,
}

impl Pool {
    pub fn new(dimension: usize, encoder_id: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            image_norms: Vec::new(),
            text_norms: Vec::new(),
            capacity: None,
            dimension,
            encoder_id: encoder_id.into(),
        }
    }

    pub fn with_capacity(mut self, capacity: Option<usize>) -> Self {
        self.capacity = capacity;
        self.evict_overflow();
        self
    }

    /// Appends `demo`, evicting the oldest entry when the pool is full.
    /// Returns the evicted entry, if any.
    pub fn push(&mut self, demo: Demonstration) -> Result<Option<Demonstration>> {
        if demo.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: demo.dimension(),
            });
        }
        if self.capacity == Some(0) {
            return Ok(Some(demo));
        }
        self.image_norms.push(norm(&demo.image_embedding));
        self.text_norms.push(norm(&demo.text_embedding));
        self.entries.push(demo);
        Ok(self.evict_overflow())
    }

    fn evict_overflow(&mut self) -> Option<Demonstration> {
        let cap = self.capacity?;
        let mut last = None;
        while self.entries.len() > cap {
            self.image_norms.remove(0);
            self.text_norms.remove(0);
            last = Some(self.entries.remove(0));
        }
        last
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Demonstration] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&Demonstration> {
        self.entries.get(index)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub(crate) fn image_norm(&self, index: usize) -> f64 {
        self.image_norms[index]
    }

    pub(crate) fn text_norm(&self, index: usize) -> f64 {
        self.text_norms[index]
    }

    /// First `n` entries in insertion order, as a new pool.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            entries: self.entries[..n].to_vec(),
            image_norms: self.image_norms[..n].to_vec(),
            text_norms: self.text_norms[..n].to_vec(),
            capacity: self.capacity,
            dimension: self.dimension,
            encoder_id: self.encoder_id.clone(),
        }
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries.iter().any(|d| d.id() == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Annotation, AnnotationSource, Sample};

    fn demo(id: &str) -> Demonstration {
        Demonstration::new(
            Sample::new(id, format!("img/{id}"), "q"),
            Annotation::new("a", AnnotationSource::Oracle),
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn append_to_empty_pool() {
        let mut pool = Pool::new(2, "enc");
        assert!(pool.push(demo("a")).unwrap().is_none());
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut pool = Pool::new(2, "enc").with_capacity(Some(2));
        pool.push(demo("a")).unwrap();
        pool.push(demo("b")).unwrap();
        let evicted = pool.push(demo("c")).unwrap().unwrap();
        assert_eq!(evicted.id(), "a");
        assert_eq!(pool.len(), 2);
        let ids: Vec<_> = pool.entries().iter().map(|d| d.id()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(pool.image_norms.len(), 2);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut pool = Pool::new(3, "enc");
        assert!(matches!(
            pool.push(demo("a")),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn insertion_order_is_stable() {
        let mut p1 = Pool::new(2, "enc");
        let mut p2 = Pool::new(2, "enc");
        for id in ["x", "y", "z"] {
            p1.push(demo(id)).unwrap();
            p2.push(demo(id)).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(p1.prefix(2).len(), 2);
        assert_eq!(p1.prefix(2).entries()[1].id(), "y");
    }
}
