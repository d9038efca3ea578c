fn main() {
    let code = r2mf_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
