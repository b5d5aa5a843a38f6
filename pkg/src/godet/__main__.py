from godet.cli import main

main()
