//! CSV artifacts with the resolved configuration in a comment header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// `# `-prefixed lines naming the tool, the experiment and its full config.
pub fn header_block(title: &str, config: &ExperimentConfig) -> Result<String> {
    let mut out = format!("# cyclefqi {title}\n# seed = {}\n", config.seed);
    for line in config.to_toml()?.lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Renders `rows` as CSV below `header`.
pub fn render_csv<R: Serialize>(header: &str, rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| e.into_error())?;
    let mut text = header.to_string();
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(text)
}

/// Writes `rows` to `dir/name` with the config header; returns the path.
pub fn write_artifact<R: Serialize>(
    dir: &Path,
    name: &str,
    title: &str,
    config: &ExperimentConfig,
    rows: &[R],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, render_csv(&header_block(title, config)?, rows)?)?;
    Ok(path)
}

/// Joins numbers with `;` so a vector fits in one CSV cell.
pub fn join_floats(xs: &[f64]) -> String {
    xs.iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentKind;

    #[derive(Serialize)]
    struct Row {
        a: usize,
        b: f64,
        c: Option<f64>,
    }

    #[test]
    fn header_lines_are_all_comments() {
        let cfg = ExperimentConfig::defaults_for(ExperimentKind::Coverage);
        let text = render_csv(
            &header_block("coverage", &cfg).unwrap(),
            &[Row { a: 1, b: 0.5, c: None }],
        )
        .unwrap();
        let mut lines = text.lines();
        let data: Vec<&str> = lines.by_ref().skip_while(|l| l.starts_with('#')).collect();
        assert_eq!(data, vec!["a,b,c", "1,0.5,"]);
        assert!(text.starts_with("# cyclefqi coverage\n# seed = 0\n"));
        assert!(text.contains("# kind = \"coverage\""));
    }

    #[test]
    fn floats_join_losslessly() {
        let xs = [0.1, -2.5e-9, 3.0];
        let back: Vec<f64> = join_floats(&xs)
            .split(';')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(back, xs);
    }
}
