fn main() {
    std::process::exit(nl_sysid::cli::dispatch(std::env::args_os()));
}
