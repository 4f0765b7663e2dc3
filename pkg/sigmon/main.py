import sigmon.libsigmon


def main() -> None:
    sigmon.libsigmon.subcommand_main()
