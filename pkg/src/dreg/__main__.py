from dreg.cli import main

main()
