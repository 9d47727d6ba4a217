from chain_surgeon.main import main

main()
