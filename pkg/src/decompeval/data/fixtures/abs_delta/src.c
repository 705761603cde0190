int abs_delta(int a, int b) {
    if (a < b)
        return b - a;
    return a - b;
}
