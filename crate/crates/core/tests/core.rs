mod par {
    use afan::par::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut data = vec![0.0; 10];
        for_each_chunk(&mut data, 3, |i, c| c.iter_mut().for_each(|x| *x = i as f64));
        assert_eq!(data, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3.]);
    }
}

mod seed {
    use afan::seed::*;

    #[test]
    fn concerns_are_independent() {
        let a = derive(7, Concern::Init, 0);
        assert_eq!(a, derive(7, Concern::Init, 0));
        assert_ne!(a, derive(7, Concern::Data, 0));
        assert_ne!(a, derive(7, Concern::Init, 1));
        assert_ne!(a, derive(8, Concern::Init, 0));
    }
}
