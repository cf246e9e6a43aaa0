# ddt-rl - supporting modules package
