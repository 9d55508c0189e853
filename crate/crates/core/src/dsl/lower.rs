//! Turns a validated program into runtime objects.

use std::collections::BTreeMap;

use super::{validate, DeclKind, Diagnostic, DslError, Program};
use crate::algebra::registry::builtin_agent;
use crate::algebra::{Pipeline, Registry};
use crate::store::{PromptStore, RefineMode, ViewDef};

#[derive(Debug, Clone)]
pub struct Lowered {
    pub registry: Registry,
    pub store: PromptStore,
    pub pipelines: BTreeMap<String, Pipeline>,
}

/// Lowers onto an empty store.
pub fn lower(program: &Program) -> Result<Lowered, DslError> {
    lower_onto(program, PromptStore::new())
}

/// Lowers onto an existing store. Views and prompts the store already holds
/// are kept; a view redefined with a different body is an error.
pub fn lower_onto(program: &Program, mut store: PromptStore) -> Result<Lowered, DslError> {
    let errors: Vec<Diagnostic> = validate(program).into_iter().filter(Diagnostic::is_error).collect();
    if !errors.is_empty() {
        return Err(DslError::Diagnostics(errors));
    }
    let mut registry = Registry::new();
    let mut pipelines = BTreeMap::new();
    let mut views: Vec<ViewDef> = Vec::new();
    let mut fail = Vec::new();
    for d in &program.decls {
        match &d.kind {
            DeclKind::View(v) => match store.view(&v.name) {
                Some(old) if old == v => {}
                Some(_) => fail.push(Diagnostic::error(d.span, format!("view '{}' differs from the stored definition", v.name))),
                None => views.push(v.clone()),
            },
            DeclKind::Refiner(r) => {
                registry.add_refiner(r.clone());
            }
            DeclKind::Source(s) => {
                registry.add_source(s.clone());
            }
            DeclKind::Agent(a) => {
                registry.add_agent(a.name.clone(), builtin_agent(&a.target).expect("validated agent target"));
            }
            DeclKind::Prompt(p) => {
                if !store.contains(&p.key) {
                    if let Err(e) = store.create_entry(&p.key, &p.text, p.params.clone(), RefineMode::Manual) {
                        fail.push(Diagnostic::error(d.span, e.to_string()));
                    }
                }
            }
            DeclKind::Pipeline(p) => {
                pipelines.insert(p.name.clone(), p.clone());
            }
        }
    }
    if let Err(e) = store.define_views(views) {
        fail.push(Diagnostic::error(Default::default(), e.to_string()));
    }
    if !fail.is_empty() {
        return Err(DslError::Diagnostics(fail));
    }
    Ok(Lowered { registry, store, pipelines })
}
