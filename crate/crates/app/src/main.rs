use std::io;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = parley::cli::run(std::env::args_os(), io::stdin().lock(), io::stdout().lock(), io::stderr().lock());
    std::process::exit(code);
}
