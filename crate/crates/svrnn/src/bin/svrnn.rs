fn main() {
    std::process::exit(svrnn::cli::main_with(std::env::args_os()));
}
