import sys
from typing import List

from openworld_bench.cli import cli

DEFAULT_CONFIG = 'configs/toy.yaml'
CONFIG_COMMANDS = ('train', 'robust-train', 'attack', 'detect', 'eval')


def _config_args() -> List[str]:
    config = input(f"Experiment config [{DEFAULT_CONFIG}]: ").strip() or DEFAULT_CONFIG
    seed = input("Seed override (leave blank to use the config): ").strip()
    out = input("Output directory override (leave blank to use the config): ").strip()
    args = ['--config', config]
    if seed:
        args.extend(['--seed', seed])
    if out:
        args.extend(['--out', out])
    return args


def interactive_menu() -> None:
    """
    Interactive menu to select and run available CLI features.
    """
    commands = list(cli.commands.keys())

    print("Available features:")
    for idx, name in enumerate(commands, start=1):
        cmd = cli.commands[name]
        help_text = (cmd.help or '').strip().splitlines()[0] if cmd.help else ''
        print(f"{idx}. {name} - {help_text}")

    choice = input("Enter the number of the feature: ").strip()
    try:
        sel = int(choice)
    except ValueError:
        print("Invalid choice.")
        sys.exit(1)

    if sel < 1 or sel > len(commands):
        print("Invalid choice.")
        sys.exit(1)

    cmd_name = commands[sel - 1]

    if cmd_name in CONFIG_COMMANDS:
        args = _config_args() + [cmd_name]
        if cmd_name == 'robust-train':
            defense = input("Defense name (leave blank for all): ").strip()
            if defense:
                args.extend(['--defense', defense])
    elif cmd_name == 'report':
        run_dir = input("Run directory (e.g. outputs/toy): ").strip()
        replay = input("Replay stored adversarial examples? (y/N): ").strip().lower() == 'y'
        args = [cmd_name, run_dir] + (['--replay'] if replay else [])
    elif cmd_name == 'fetch-mnist':
        dest = input("Destination folder [data/mnist]: ").strip() or 'data/mnist'
        args = [cmd_name, dest]
    elif cmd_name == 'gen-ood':
        dest = input("Destination folder [data/ood/gaussian]: ").strip() or 'data/ood/gaussian'
        kind = input("Generator (gaussian/shapes) [gaussian]: ").strip() or 'gaussian'
        count = input("Number of images [1000]: ").strip() or '1000'
        args = [cmd_name, dest, '--kind', kind, '--count', count]
    else:
        args = [cmd_name]

    try:
        cli.main(args=args, standalone_mode=False)
    except Exception as e:
        print(f"Error: {e}")
        sys.exit(1)


def main() -> None:
    """
    Entry point for the Open-World Evasion Bench CLI.
    If no arguments are provided, launch interactive menu.
    """
    if len(sys.argv) == 1:
        interactive_menu()
    else:
        cli()


if __name__ == '__main__':  # pragma: no cover
    main()
