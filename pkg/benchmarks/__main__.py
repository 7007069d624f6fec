import throughput


throughput.main()
