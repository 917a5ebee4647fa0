mod cli;

use clap::Parser;

fn main() {
    let cli = match cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { cli::EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(f) = cli::configure_threads().and_then(|()| cli::run(cli)) {
        // Library errors already embed their source; print each new cause once.
        let mut msg = String::new();
        for cause in f.error.chain().map(|c| c.to_string()) {
            if !msg.ends_with(&cause) {
                msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(f.code);
    }
}
