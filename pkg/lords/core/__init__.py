# numerical core of lords
