//! `bdb`: submit deep-copy requests, poll receipts, fetch results, and
//! manage request templates.
//!
//! Exit codes are part of the interface, for scripting:
//! - submit: 0 queued, 3 cannot connect, 4 server refused
//! - status: 0 Done, 1 still in progress, 4 Failed/Rejected, 5 unknown receipt
//! - fetch:  0 written, 3 cannot connect, 4 server error
//! - template/other usage problems: 2

use std::path::PathBuf;
use std::process::ExitCode;

use bdb_cli::template::{parse_bindings, TemplateStore};
use bdb_cli::wire::{Client, WireError};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bdb", about = "Data broker client", version)]
struct Cli {
    /// Broker address, host:port.
    #[arg(long, global = true, env = "BDB_SERVER", default_value = "127.0.0.1:7070")]
    server: String,
    /// Distinguished name to authenticate as.
    #[arg(long, global = true, env = "BDB_DN", default_value = "")]
    dn: String,
    /// Template directory.
    #[arg(long, global = true, env = "BDB_TEMPLATES")]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Queue a request document; prints the receipt id.
    Submit {
        /// Request document file; `-` reads stdin.
        #[arg(short = 'f', long, conflicts_with = "template")]
        file: Option<String>,
        /// Render a saved template instead of reading a file.
        #[arg(long)]
        template: Option<String>,
        /// Placeholder bindings, key=value, repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Show a receipt's state and history.
    Status { receipt: String },
    /// Download a finished result to a local file.
    Fetch {
        receipt: String,
        #[arg(short = 'o', long, default_value = "result.bundle")]
        output: PathBuf,
    },
    /// Manage request templates.
    Template {
        #[command(subcommand)]
        action: TemplateAction,
    },
}

#[derive(Subcommand)]
enum TemplateAction {
    /// Save a document file as a named template.
    Save { name: String, file: PathBuf },
    /// Render a template to stdout.
    Render {
        name: String,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// List saved templates.
    List,
}

fn template_dir(cli: &Cli) -> PathBuf {
    cli.templates.clone().unwrap_or_else(|| {
        std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(".bdb-templates")
    })
}

fn read_document(cli: &Cli, file: &Option<String>, template: &Option<String>, set: &[String]) -> Result<String, String> {
    match (file, template) {
        (Some(path), None) => {
            if path == "-" {
                let mut text = String::new();
                std::io::Read::read_to_string(&mut std::io::stdin(), &mut text)
                    .map_err(|e| format!("stdin: {e}"))?;
                Ok(text)
            } else {
                std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
            }
        }
        (None, Some(name)) => {
            let bindings = parse_bindings(set).map_err(|e| e.to_string())?;
            TemplateStore::new(&template_dir(cli))
                .render(name, &bindings)
                .map_err(|e| e.to_string())
        }
        _ => Err("pass exactly one of -f FILE or --template NAME".to_string()),
    }
}

fn connect(cli: &Cli) -> Result<Client, ExitCode> {
    Client::connect(&cli.server, &cli.dn).map_err(|e| {
        eprintln!("bdb: {e}");
        match e {
            WireError::Connect { .. } => ExitCode::from(3),
            _ => ExitCode::from(4),
        }
    })
}

fn run(cli: Cli) -> ExitCode {
    match &cli.command {
        Command::Submit { file, template, set } => {
            let document = match read_document(&cli, file, template, set) {
                Ok(document) => document,
                Err(e) => {
                    eprintln!("bdb: {e}");
                    return ExitCode::from(2);
                }
            };
            let mut client = match connect(&cli) {
                Ok(client) => client,
                Err(code) => return code,
            };
            match client.call(json!({"verb": "submit", "document": document})) {
                Ok(reply) => {
                    println!("{}", reply["receipt"].as_str().unwrap_or_default());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("bdb: {e}");
                    ExitCode::from(4)
                }
            }
        }
        Command::Status { receipt } => {
            let mut client = match connect(&cli) {
                Ok(client) => client,
                Err(code) => return code,
            };
            match client.call(json!({"verb": "status", "receipt": receipt})) {
                Ok(reply) => {
                    let state = reply["state"].as_str().unwrap_or("?");
                    print!("{receipt} {state}");
                    if let Some(location) = reply["location"].as_str() {
                        print!(" {location}");
                    }
                    if let Some(detail) = reply["detail"].as_str() {
                        print!(" ({detail})");
                    }
                    println!();
                    match state {
                        "Done" => ExitCode::SUCCESS,
                        "Failed" | "Rejected" => ExitCode::from(4),
                        _ => ExitCode::from(1),
                    }
                }
                Err(WireError::Server { code, .. }) if code == "UNKNOWN_RECEIPT" => {
                    eprintln!("bdb: unknown receipt {receipt}");
                    ExitCode::from(5)
                }
                Err(e) => {
                    eprintln!("bdb: {e}");
                    ExitCode::from(4)
                }
            }
        }
        Command::Fetch { receipt, output } => {
            let mut client = match connect(&cli) {
                Ok(client) => client,
                Err(code) => return code,
            };
            match client.call(json!({"verb": "fetch", "receipt": receipt})) {
                Ok(reply) => {
                    let content_hex = reply["content_hex"].as_str().unwrap_or_default();
                    let bytes = match hex::decode(content_hex) {
                        Ok(bytes) => bytes,
                        Err(e) => {
                            eprintln!("bdb: malformed content from server: {e}");
                            return ExitCode::from(4);
                        }
                    };
                    if let Err(e) = std::fs::write(output, &bytes) {
                        eprintln!("bdb: cannot write {}: {e}", output.display());
                        return ExitCode::from(2);
                    }
                    println!("{} ({} bytes)", output.display(), bytes.len());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("bdb: {e}");
                    ExitCode::from(4)
                }
            }
        }
        Command::Template { action } => {
            let store = TemplateStore::new(&template_dir(&cli));
            let result: Result<(), String> = match action {
                TemplateAction::Save { name, file } => std::fs::read_to_string(file)
                    .map_err(|e| format!("{}: {e}", file.display()))
                    .and_then(|text| store.save(name, &text).map_err(|e| e.to_string())),
                TemplateAction::Render { name, set } => parse_bindings(set)
                    .map_err(|e| e.to_string())
                    .and_then(|bindings| {
                        store.render(name, &bindings).map_err(|e| e.to_string())
                    })
                    .map(|text| print!("{text}")),
                TemplateAction::List => store.list().map_err(|e| e.to_string()).map(|names| {
                    for name in names {
                        println!("{name}");
                    }
                }),
            };
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("bdb: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse())
}
