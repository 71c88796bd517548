use std::io::{BufRead, IsTerminal, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use demo_chat::{build_chat_program, ChatLog, ChatOptions, ChatProgram, Message, Variant};
use tierflow::mode::ModeRequest;
use tierflow::{Pulse, Val};
use tierflow_net::{serve, ClientRuntime, ServerConfig};

#[derive(Parser)]
#[command(name = "demo-chat", about = "Multi-tier chat over WebSocket or request/response")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ProgramArgs {
    /// push, polled or full-state. The client picks the server's when omitted.
    #[arg(long)]
    variant: Option<Variant>,
    /// Poll period of the polled variant, in milliseconds.
    #[arg(long, default_value_t = 500)]
    poll_ms: u64,
    /// Adds a session clock pushed at this period, in milliseconds.
    #[arg(long)]
    clock_ms: Option<u64>,
}

impl ProgramArgs {
    fn build(&self, variant: Variant) -> ChatProgram {
        build_chat_program(ChatOptions {
            variant,
            poll: Duration::from_millis(self.poll_ms),
            clock: self.clock_ms.map(Duration::from_millis),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Runs the chat server.
    Serve {
        /// auto, ws or xhr.
        #[arg(long, default_value = "auto")]
        mode: ModeRequest,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Serves a browser client from this directory.
        #[arg(long)]
        web_ui: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        xhr_timeout_secs: u64,
        #[command(flatten)]
        program: ProgramArgs,
    },
    /// Posts lines read from standard input and renders the log.
    Client {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        #[arg(long)]
        name: String,
        #[command(flatten)]
        program: ProgramArgs,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let r = match Cli::parse().command {
        Command::Serve {
            mode,
            port,
            host,
            web_ui,
            xhr_timeout_secs,
            program,
        } => run_server(mode, SocketAddr::new(host, port), web_ui, xhr_timeout_secs, program).await,
        Command::Client { url, name, program } => run_client(url, name, program).await,
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("demo-chat: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run_server(
    mode: ModeRequest,
    addr: SocketAddr,
    web_ui: Option<PathBuf>,
    xhr_timeout_secs: u64,
    program: ProgramArgs,
) -> Result<(), String> {
    let chat = program.build(program.variant.unwrap_or(Variant::Push));
    let config = ServerConfig {
        addr,
        mode,
        xhr_timeout: Duration::from_secs(xhr_timeout_secs),
        static_dir: web_ui,
        ..ServerConfig::default()
    };
    let server = serve(chat.graph.clone(), config).await.map_err(|e| e.to_string())?;
    println!(
        "serving {:?} chat on {} over {}",
        chat.options.variant,
        server.base_url(),
        server.transport()
    );
    tokio::signal::ctrl_c().await.map_err(|e| e.to_string())?;
    let stats = server.stats();
    server.shutdown().await;
    println!(
        "{} cycles, {} connects, {} messages in, {} out",
        stats.cycles, stats.connects, stats.messages_in, stats.messages_out
    );
    Ok(())
}

/// The variant whose manifest version the server reports.
async fn detect_variant(url: &str, program: &ProgramArgs) -> Result<ChatProgram, String> {
    let candidates = match program.variant {
        Some(v) => vec![v],
        None => vec![Variant::Push, Variant::Polled, Variant::PushFullState],
    };
    let mode = tierflow_net::fetch_mode(url)
        .await
        .map_err(|e| format!("{url}: {e}"))?;
    for v in candidates {
        let p = program.build(v);
        if p.graph.manifest_version() == mode.version {
            return Ok(p);
        }
    }
    Err("the server runs a different chat program; check --variant, --poll-ms and --clock-ms".into())
}

async fn run_client(url: String, name: String, program: ProgramArgs) -> Result<(), String> {
    let url = url.trim_end_matches('/').to_string();
    let chat = detect_variant(&url, &program).await?;
    let clear = std::io::stdout().is_terminal();
    // Polls restep the view with an unchanged log; those are not redrawn.
    let mut shown: Option<ChatLog> = None;
    let client = ClientRuntime::new(chat.graph.clone(), url.clone())
        .on_render(move |v| {
            let log = v.get::<ChatLog>();
            if shown.as_ref() != Some(&log) {
                render(&log, clear);
                shown = Some(log);
            }
        })
        .connect()
        .await
        .map_err(|e| format!("{url}: {e}"))?;
    eprintln!("connected as {} over {}", client.token(), client.transport());

    // Standard input is read on its own thread, which fires the source.
    let queue = client.queue();
    let input = chat.input_node();
    let (done_tx, mut done_rx) = tokio::sync::oneshot::channel::<u64>();
    std::thread::spawn(move || {
        let mut sent = 0;
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            queue.push(Pulse::new(input, Val::new(Message::new(name.clone(), line))));
            sent += 1;
        }
        let _ = done_tx.send(sent);
    });

    let mut state = client.state();
    let sent = tokio::select! {
        n = &mut done_rx => n.unwrap_or(0),
        _ = state.wait_for(|s| matches!(s, tierflow::client::ConnectionState::Closed(_))) => {
            return Err(format!("connection lost: {:?}", *client.state().borrow()));
        }
    };
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while client.stats().messages_out < sent && tokio::time::Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    client.close().await;
    Ok(())
}

fn render(log: &ChatLog, clear: bool) {
    let mut out = std::io::stdout().lock();
    if clear {
        let _ = write!(out, "\x1b[2J\x1b[H");
    } else {
        let _ = writeln!(out, "--- {} messages", log.len());
    }
    for line in log.lines() {
        let _ = writeln!(out, "{line}");
    }
    let _ = out.flush();
}
