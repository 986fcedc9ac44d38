//! Category registry: every run works against a fixed table of categories,
//! each with a role (base objects the pretrained detector already knows vs
//! novel objects the loop must learn), a shape archetype, and a palette
//! color. Ids are dense indices into the registration order, so per-category
//! tables elsewhere can be plain vectors.
//!
//! The built-in palette deliberately overlaps hues across roles (the base
//! `wedge` is reddish like the novel `cube`, the base `ring` bluish like the
//! novel `can`) so color alone cannot separate novel objects from base ones.

use crate::geom::CategoryId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("category name {0:?} registered twice")]
    DuplicateName(String),
    #[error("unknown category name {0:?}")]
    UnknownName(String),
    #[error("unknown category id {0}")]
    UnknownId(CategoryId),
    #[error("archetype {archetype:?} is reserved for {expected:?} categories")]
    RoleMismatch { archetype: ShapeArchetype, expected: CategoryRole },
}

/// Whether the pretrained detector has seen the category before the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryRole {
    Base,
    Novel,
}

impl std::fmt::Display for CategoryRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CategoryRole::Base => write!(f, "base"),
            CategoryRole::Novel => write!(f, "novel"),
        }
    }
}

/// Renderable silhouette family. Novel categories use the four filled
/// archetypes; base categories use the two marker shapes, which keeps the
/// two worlds visually distinct in silhouette but not in color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeArchetype {
    Square,
    Disc,
    WideRectangle,
    TallEllipse,
    Triangle,
    Ring,
}

impl ShapeArchetype {
    /// Role each archetype belongs to in the built-in world.
    pub fn expected_role(self) -> CategoryRole {
        match self {
            ShapeArchetype::Square
            | ShapeArchetype::Disc
            | ShapeArchetype::WideRectangle
            | ShapeArchetype::TallEllipse => CategoryRole::Novel,
            ShapeArchetype::Triangle | ShapeArchetype::Ring => CategoryRole::Base,
        }
    }
}

/// One registered category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: CategoryId,
    pub name: String,
    pub role: CategoryRole,
    pub archetype: ShapeArchetype,
    /// Base RGB before per-instance jitter.
    pub base_color: [u8; 3],
}

/// Immutable-after-registration category table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRegistry {
    defs: Vec<CategoryDef>,
}

impl CategoryRegistry {
    pub fn new() -> Self {
        CategoryRegistry::default()
    }

    /// Registers a category and returns its id. Names must be unique and the
    /// archetype must match the role (see [`ShapeArchetype::expected_role`]).
    pub fn register(
        &mut self,
        name: &str,
        role: CategoryRole,
        archetype: ShapeArchetype,
        base_color: [u8; 3],
    ) -> Result<CategoryId, RegistryError> {
        if self.defs.iter().any(|d| d.name == name) {
            return Err(RegistryError::DuplicateName(name.to_owned()));
        }
        if archetype.expected_role() != role {
            return Err(RegistryError::RoleMismatch { archetype, expected: archetype.expected_role() });
        }
        let id = CategoryId(u16::try_from(self.defs.len()).expect("registry overflow"));
        self.defs.push(CategoryDef { id, name: name.to_owned(), role, archetype, base_color });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn def(&self, id: CategoryId) -> Result<&CategoryDef, RegistryError> {
        self.defs.get(id.index()).ok_or(RegistryError::UnknownId(id))
    }

    pub fn by_name(&self, name: &str) -> Result<&CategoryDef, RegistryError> {
        self.defs
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| RegistryError::UnknownName(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CategoryDef> {
        self.defs.iter()
    }

    /// Ids of all base categories, in id order.
    pub fn base_ids(&self) -> Vec<CategoryId> {
        self.defs.iter().filter(|d| d.role == CategoryRole::Base).map(|d| d.id).collect()
    }

    /// Ids of all novel categories, in id order.
    pub fn novel_ids(&self) -> Vec<CategoryId> {
        self.defs.iter().filter(|d| d.role == CategoryRole::Novel).map(|d| d.id).collect()
    }
}

/// Built-in novel categories: `(name, archetype, base RGB)`.
pub const BUILTIN_NOVEL: [(&str, ShapeArchetype, [u8; 3]); 4] = [
    ("cube", ShapeArchetype::Square, [203, 74, 66]),
    ("can", ShapeArchetype::Disc, [66, 99, 197]),
    ("box", ShapeArchetype::WideRectangle, [84, 167, 92]),
    ("bottle", ShapeArchetype::TallEllipse, [205, 181, 74]),
];

/// Built-in base categories: `(name, archetype, base RGB)`. Hues shadow the
/// novel palette on purpose; see the module docs.
pub const BUILTIN_BASE: [(&str, ShapeArchetype, [u8; 3]); 2] = [
    ("wedge", ShapeArchetype::Triangle, [196, 98, 90]),
    ("ring", ShapeArchetype::Ring, [90, 110, 186]),
];

/// Builds the standard registry: the two built-in base categories plus the
/// requested built-in novel categories, registered in the given order.
pub fn builtin_registry(novel_names: &[String]) -> Result<CategoryRegistry, RegistryError> {
    let mut reg = CategoryRegistry::new();
    for (name, archetype, color) in BUILTIN_BASE {
        reg.register(name, CategoryRole::Base, archetype, color)?;
    }
    for requested in novel_names {
        let (name, archetype, color) = BUILTIN_NOVEL
            .iter()
            .find(|(n, _, _)| n == requested)
            .ok_or_else(|| RegistryError::UnknownName(requested.clone()))?;
        reg.register(name, CategoryRole::Novel, *archetype, *color)?;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn builtin_registry_orders_base_before_novel() {
        let reg = builtin_registry(&names(&["cube", "can"])).unwrap();
        assert_eq!(reg.len(), 4);
        assert_eq!(reg.base_ids(), vec![CategoryId(0), CategoryId(1)]);
        assert_eq!(reg.novel_ids(), vec![CategoryId(2), CategoryId(3)]);
        assert_eq!(reg.by_name("cube").unwrap().id, CategoryId(2));
        assert_eq!(reg.def(CategoryId(0)).unwrap().name, "wedge");
    }

    #[test]
    fn duplicate_and_unknown_names_are_rejected() {
        let mut reg = builtin_registry(&names(&["cube"])).unwrap();
        assert_eq!(
            reg.register("cube", CategoryRole::Novel, ShapeArchetype::Disc, [0, 0, 0]),
            Err(RegistryError::DuplicateName("cube".into()))
        );
        assert!(matches!(
            builtin_registry(&names(&["teapot"])),
            Err(RegistryError::UnknownName(_))
        ));
        assert!(matches!(reg.by_name("nope"), Err(RegistryError::UnknownName(_))));
        assert!(matches!(reg.def(CategoryId(99)), Err(RegistryError::UnknownId(_))));
    }

    #[test]
    fn archetypes_are_pinned_to_roles() {
        let mut reg = CategoryRegistry::new();
        assert!(matches!(
            reg.register("t", CategoryRole::Novel, ShapeArchetype::Triangle, [1, 2, 3]),
            Err(RegistryError::RoleMismatch { .. })
        ));
        assert!(matches!(
            reg.register("s", CategoryRole::Base, ShapeArchetype::Square, [1, 2, 3]),
            Err(RegistryError::RoleMismatch { .. })
        ));
    }

    #[test]
    fn builtin_palettes_overlap_across_roles() {
        // Guard the "color alone is not enough" property: the reddish base
        // wedge must sit closer to the novel cube than to any other novel
        // color, and likewise ring/can for blue.
        let dist = |a: [u8; 3], b: [u8; 3]| -> i32 {
            (0..3).map(|i| (i32::from(a[i]) - i32::from(b[i])).pow(2)).sum()
        };
        let wedge = BUILTIN_BASE[0].2;
        let ring = BUILTIN_BASE[1].2;
        let to_cube = dist(wedge, BUILTIN_NOVEL[0].2);
        let to_can = dist(ring, BUILTIN_NOVEL[1].2);
        for (i, (_, _, c)) in BUILTIN_NOVEL.iter().enumerate() {
            if i != 0 {
                assert!(to_cube < dist(wedge, *c));
            }
            if i != 1 {
                assert!(to_can < dist(ring, *c));
            }
        }
    }
}
