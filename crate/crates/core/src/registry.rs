//! Name-keyed registries of interchangeable strategies.

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Box<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    pub fn register(&mut self, name: &'static str, item: Box<T>) -> &mut Self {
        assert!(!self.entries.iter().any(|(n, _)| *n == name), "duplicate {} `{name}`", self.kind);
        self.entries.push((name, item));
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, t)| t.as_ref()).ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}
