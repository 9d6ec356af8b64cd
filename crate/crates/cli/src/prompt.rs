//! Terminal loop for variables an interactive session leaves open.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use anyhow::{bail, Result};
use cdr_agent::pipeline::ResolveError;
use cdr_agent::{AnalysisSession, CdrStatus, Pipeline, SessionStatus};

/// Ask for each pending variable in turn until the session completes. A
/// value that does not fit the variable's type is asked for again; end of
/// input is an error.
pub fn resolve_all(
    pipeline: &Pipeline,
    session: &mut AnalysisSession,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> Result<()> {
    while session.status == SessionStatus::AwaitingInput {
        let Some((cdr_id, variable)) = session
            .pending
            .iter()
            .find_map(|(id, vars)| vars.first().map(|v| (id.clone(), v.clone())))
        else {
            break;
        };
        let def = pipeline
            .registry()
            .get(&cdr_id)
            .expect("pending rule is in the registry");
        let spec = def.variable(&variable).expect("pending variable is declared");
        writeln!(out, "[{}] {}: {}", def.name, variable, spec.definition)?;
        loop {
            write!(out, "  {} ({})> ", variable, spec.vtype)?;
            out.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                bail!("input ended while `{variable}` of `{cdr_id}` was still open");
            }
            let values = BTreeMap::from([(variable.clone(), serde_json::Value::String(line.trim().into()))]);
            match pipeline.resolve_variables(session, &cdr_id, &values) {
                Ok(()) => break,
                Err(e @ ResolveError::TypeMismatch { .. }) => writeln!(out, "  {e}")?,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

/// One line per selected rule, for the terminal.
pub fn summary(session: &AnalysisSession) -> String {
    let mut s = String::new();
    if session.report.per_cdr.is_empty() {
        s.push_str("no applicable rule\n");
    }
    for r in &session.report.per_cdr {
        let line = match &r.status {
            CdrStatus::Outcome { label, is_positive } => {
                format!("{label}{}", if *is_positive { " (positive)" } else { "" })
            }
            CdrStatus::Excluded { reasons } => format!("excluded: {}", reasons.join("; ")),
            CdrStatus::Error { stage, message, .. } => format!("error in {stage}: {message}"),
            CdrStatus::AwaitingInput { variables } => format!("awaiting {}", variables.join(", ")),
        };
        s.push_str(&format!("{}: {line}\n", r.cdr_id));
    }
    s
}
