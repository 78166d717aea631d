use clap::Parser;

fn main() {
    // Die quietly when stdout closes mid-stream (e.g. piped into `head`)
    // instead of panicking inside println!.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }

    let cli = ddpinn::commands::Cli::parse();
    if let Err(e) = ddpinn::commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
