fn main() -> anyhow::Result<()> {
    let code = dsfe::cli::run(std::env::args_os());
    if code != 0 {
        std::process::exit(code);
    }
    Ok(())
}
