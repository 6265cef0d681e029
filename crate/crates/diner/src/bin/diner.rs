fn main() {
    let code = diner::harness::cli::cli_dispatch(std::env::args().skip(1));
    std::process::exit(code);
}
