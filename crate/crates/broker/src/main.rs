//! `bdb-server`: load a config, bind the wire protocol, serve until shut
//! down. The config path comes from the first argument or
//! `BDB_SERVER_CONFIG`.
//!
//! Exit codes: 0 on clean shutdown, 2 on a config problem.

use std::path::PathBuf;
use std::process::ExitCode;

use bdb_broker::config::BrokerConfig;
use bdb_broker::server::Server;
use bdb_broker::Broker;

fn config_path() -> Option<PathBuf> {
    std::env::args().nth(1).map(PathBuf::from).or_else(|| {
        std::env::var_os("BDB_SERVER_CONFIG").map(PathBuf::from)
    })
}

fn main() -> ExitCode {
    let Some(path) = config_path() else {
        eprintln!("usage: bdb-server <config.toml>  (or set BDB_SERVER_CONFIG)");
        return ExitCode::from(2);
    };
    let config = match BrokerConfig::from_file(&path) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("bdb-server: {e}");
            return ExitCode::from(2);
        }
    };
    let Some(listen) = config.listen.clone() else {
        eprintln!("bdb-server: config has no listen address");
        return ExitCode::from(2);
    };
    let broker = match Broker::open(config) {
        Ok(broker) => broker,
        Err(e) => {
            eprintln!("bdb-server: {e}");
            return ExitCode::from(2);
        }
    };
    let server = match Server::bind(broker, &listen) {
        Ok(server) => server,
        Err(e) => {
            eprintln!("bdb-server: cannot bind {listen}: {e}");
            return ExitCode::from(2);
        }
    };
    match server.local_addr() {
        Ok(addr) => println!("bdb-server listening on {addr}"),
        Err(_) => println!("bdb-server listening on {listen}"),
    }
    if let Err(e) = server.run() {
        eprintln!("bdb-server: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
