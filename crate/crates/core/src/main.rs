fn main() {
    std::process::exit(gdp::cli::run(std::env::args_os()));
}
