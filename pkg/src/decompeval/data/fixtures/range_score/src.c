int range_score(int v) {
    if (v < 50) {
        if (v < 10)
            return 1;
        return 2;
    }
    if (v < 200)
        return 3;
    return 4;
}
