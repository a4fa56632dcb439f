//! Box meshes and coefficient fields.

mod field;
mod mesh;

pub use field::{
    bump, det, identity_sym, inverse, load_field_csv, make_field, sym_eigenvalues, Bounds, CoefficientField,
    Expression, FieldKind, ScalarFn, Sym, TensorFn,
};
pub use mesh::{build_box_mesh, Dof, Facet, Mesh};
