//! Config files: flat `key=value` lines whose keys are the long flag names
//! (underscores and dashes are interchangeable). A config file is spliced
//! into the argument list ahead of the command-line flags, so flags win.

use std::ffi::OsString;
use std::fs;

use crate::error::CliError;

/// Turns config text into `--key=value` arguments.
pub fn config_args(text: &str) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {}: expected key=value, got `{line}`",
                n + 1
            )));
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Usage(format!(
                "config line {}: bad key `{key}`",
                n + 1
            )));
        }
        out.push(format!("--{key}={}", value.trim()).into());
    }
    Ok(out)
}

/// Removes every `--config PATH` (or `--config=PATH`) from `args` and
/// splices the file's settings in right after the subcommand name.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut kept = Vec::with_capacity(args.len());
    let mut paths = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        if text == "--" {
            kept.push(arg);
            kept.extend(iter.by_ref());
            break;
        }
        if text == "--config" {
            let path = iter
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
            paths.push(path);
        } else if let Some(path) = text.strip_prefix("--config=") {
            paths.push(OsString::from(path));
        } else {
            kept.push(arg);
        }
    }
    if paths.is_empty() {
        return Ok(kept);
    }
    let mut spliced = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("config {}", path.to_string_lossy()), e))?;
        spliced.extend(config_args(&text)?);
    }
    // The subcommand is the first argument after the program name that is
    // not a flag.
    let at = kept
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2)
        .ok_or_else(|| CliError::Usage("--config needs a subcommand".into()))?;
    kept.splice(at..at, spliced);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[OsString]) -> Vec<String> {
        v.iter().map(|s| s.to_string_lossy().into_owned()).collect()
    }

    #[test]
    fn lines_become_flags() {
        let args = config_args("# run settings\nratio = 0.5\n\ndecode_steps=20\n").unwrap();
        assert_eq!(strings(&args), ["--ratio=0.5", "--decode-steps=20"]);
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        assert_eq!(config_args("ratio").unwrap_err().exit_code(), 1);
        assert_eq!(config_args("=3").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn config_is_spliced_before_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "ratio=0.5\nseed=3\n").unwrap();
        let args: Vec<OsString> = [
            "moesim",
            "run",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        let out = strings(&expand_config(args).unwrap());
        assert_eq!(
            out,
            ["moesim", "run", "--ratio=0.5", "--seed=3", "--seed", "9"]
        );
    }

    #[test]
    fn missing_config_is_a_data_error() {
        let args = ["moesim", "run", "--config=/nonexistent/x.conf"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(expand_config(args).unwrap_err().exit_code(), 2);
    }
}
